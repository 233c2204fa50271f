"""Dataset layout on disk.

A dataset root holds `classes.json` plus one directory per sample containing
`image.png` (RGB), `seg.png` (8-bit single-channel class indices), and
optionally `inst.png` (16-bit instance ids, 0 = no instance), all the same
size. `classes.json` lists class names, the class count, and the foreground
class indices:

    {"names": ["sky", ...], "num_classes": 4, "foreground_set": [2, 3]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError


@dataclass(frozen=True)
class ClassesSpec:
    names: tuple[str, ...]
    num_classes: int
    foreground_set: tuple[int, ...]

    def __post_init__(self):
        if len(self.names) != self.num_classes:
            raise ValidationError(
                f"classes.json lists {len(self.names)} names for num_classes={self.num_classes}"
            )
        for c in self.foreground_set:
            if not 0 <= c < self.num_classes:
                raise ValidationError(f"foreground index {c} outside [0, {self.num_classes})")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "foreground_set", tuple(sorted(set(self.foreground_set))))

    def background_flags(self) -> list[bool]:
        fg = set(self.foreground_set)
        return [c not in fg for c in range(self.num_classes)]

    def class_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown class name {name!r}") from None


def load_classes(root: str | Path) -> ClassesSpec:
    raw = json.loads((Path(root) / "classes.json").read_text())
    return ClassesSpec(
        names=tuple(raw["names"]),
        num_classes=int(raw["num_classes"]),
        foreground_set=tuple(raw["foreground_set"]),
    )


def save_classes(root: str | Path, spec: ClassesSpec) -> None:
    payload = {
        "names": list(spec.names),
        "num_classes": spec.num_classes,
        "foreground_set": list(spec.foreground_set),
    }
    (Path(root) / "classes.json").write_text(json.dumps(payload, indent=2))


def load_image_01(path: str | Path) -> np.ndarray:
    """RGB PNG -> H x W x 3 float32 in [0, 1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_image_01(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_labels_png(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValidationError(f"{path} is not a single-channel label map")
    return arr.astype(np.int64)


def save_labels_png(path: str | Path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels).astype(np.uint8), mode="L").save(path)


def load_instances_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ValidationError(f"{path} is not a single-channel instance map")
    return arr.astype(np.int32)


def save_instances_png(path: str | Path, instances: np.ndarray) -> None:
    Image.fromarray(np.asarray(instances).astype(np.uint16), mode="I;16").save(path)


@dataclass(frozen=True)
class SceneSample:
    name: str
    image: np.ndarray  # H x W x 3 float32 [0, 1]
    labels: np.ndarray  # H x W int64
    instance_map: np.ndarray | None  # H x W int32 or None


class SceneDataset:
    """Eagerly loaded directory dataset; toy scale keeps everything in RAM."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ValidationError(f"dataset root {self.root} does not exist")
        self.classes = load_classes(self.root)
        self._dirs = sorted(d for d in self.root.iterdir() if d.is_dir())
        if not self._dirs:
            raise ValidationError(f"dataset root {self.root} has no sample directories")
        self._cache: dict[int, SceneSample] = {}

    def __len__(self) -> int:
        return len(self._dirs)

    def __getitem__(self, i: int) -> SceneSample:
        if i not in self._cache:
            d = self._dirs[i]
            image = load_image_01(d / "image.png")
            labels = load_labels_png(d / "seg.png")
            inst_path = d / "inst.png"
            inst = load_instances_png(inst_path) if inst_path.exists() else None
            if labels.shape != image.shape[:2] or (inst is not None and inst.shape != labels.shape):
                raise ValidationError(f"sample {d.name}: image/seg/inst sizes disagree")
            if labels.max() >= self.classes.num_classes:
                raise ValidationError(
                    f"sample {d.name}: label {labels.max()} >= num_classes {self.classes.num_classes}"
                )
            self._cache[i] = SceneSample(name=d.name, image=image, labels=labels, instance_map=inst)
        return self._cache[i]

    def samples(self):
        return [self[i] for i in range(len(self))]
