"""Synthetic toy scenes for overfit smoke runs and demos.

Each scene is a smooth sky gradient over a striped ground plane with two
foreground instances (a box and a blob) in per-sample colors. Small, easy to
memorize, and fully labeled (seg + instance maps), which is exactly what the
desk-scale training targets need.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .data import ClassesSpec, save_classes, save_image_01, save_instances_png, save_labels_png

TOY_CLASSES = ClassesSpec(
    names=("sky", "ground", "box", "blob"),
    num_classes=4,
    foreground_set=(2, 3),
)


def make_toy_scene(size: int, rng: np.random.Generator):
    """One scene as (image01, labels, instance_map)."""
    img = np.zeros((size, size, 3), dtype=np.float32)
    labels = np.zeros((size, size), dtype=np.int64)
    inst = np.zeros((size, size), dtype=np.int32)

    horizon = int(size * rng.uniform(0.5, 0.65))
    sky_top = rng.uniform(0.55, 0.9, size=3)
    sky_bot = sky_top * rng.uniform(0.55, 0.8)
    t = (np.arange(size) / max(1, size - 1))[:, None, None]
    img[:] = sky_top * (1 - t) + sky_bot * t
    labels[:horizon] = 0

    ground_base = rng.uniform(0.15, 0.45, size=3)
    stripe = rng.uniform(0.05, 0.15)
    rows = np.arange(horizon, size)
    ground = np.repeat(ground_base[None], len(rows), axis=0)
    ground[(rows // max(2, size // 16)) % 2 == 1] += stripe
    img[horizon:] = ground[:, None, :]
    labels[horizon:] = 1

    # Box instance on the left half of the ground.
    bh = int(size * rng.uniform(0.2, 0.33))
    bw = int(size * rng.uniform(0.16, 0.3))
    by = int(rng.uniform(horizon - bh * 0.4, size - bh - 1))
    bx = int(rng.uniform(1, size // 2 - bw - 1))
    color = rng.uniform(0.25, 0.95, size=3)
    img[by : by + bh, bx : bx + bw] = color
    img[by : by + 2, bx : bx + bw] = color * 0.5
    labels[by : by + bh, bx : bx + bw] = 2
    inst[by : by + bh, bx : bx + bw] = 1

    # Blob instance on the right half.
    ry = int(size * rng.uniform(0.12, 0.2))
    rx = int(size * rng.uniform(0.1, 0.16))
    cy = int(rng.uniform(horizon - ry * 0.2, size - ry - 2))
    cx = int(rng.uniform(size // 2 + rx + 1, size - rx - 2))
    blob_mask = np.zeros((size, size), dtype=np.uint8)
    cv2.ellipse(blob_mask, (cx, cy), (rx, ry), 0, 0, 360, 1, -1)
    blob_color = rng.uniform(0.25, 0.95, size=3)
    img[blob_mask == 1] = blob_color
    labels[blob_mask == 1] = 3
    inst[blob_mask == 1] = 2

    return np.clip(img, 0.0, 1.0), labels, inst


def make_toy_dataset(root: str | Path, num_samples: int = 8, size: int = 64, seed: int = 0) -> Path:
    """Write a toy dataset in the on-disk layout; returns the root."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_classes(root, TOY_CLASSES)
    rng = np.random.default_rng(seed)
    for i in range(num_samples):
        d = root / f"sample_{i:03d}"
        d.mkdir(exist_ok=True)
        image, labels, inst = make_toy_scene(size, rng)
        save_image_01(d / "image.png", image)
        save_labels_png(d / "seg.png", labels)
        save_instances_png(d / "inst.png", inst)
    return root
