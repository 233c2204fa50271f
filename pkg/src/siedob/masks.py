"""Random edit-mask generators used for training.

Three families: free-form brush strokes, one-sided extension bands, and
outpainting frames. All are deterministic under a fixed seed, return
H x W uint8 masks with 1 marking the edited region, and scale their pixel
parameters with resolution (reference is 256 x 256).
"""

from __future__ import annotations

import enum

import cv2
import numpy as np

REFERENCE_SIZE = 256
BRUSH_WIDTH_RANGE = (12, 40)  # px at the reference resolution
STROKE_COUNT_RANGE = (1, 6)
VERTEX_COUNT_RANGE = (4, 8)
SEGMENT_LENGTH_RANGE = (0.08, 0.35)  # relative to min(h, w)
BAND_RATIO_RANGE = (0.25, 0.50)  # extension band / outpainting mask area


class MaskKind(enum.Enum):
    FREE_FORM = "free_form"
    EXTENSION = "extension"
    OUTPAINTING = "outpainting"


def _free_form(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    scale = min(height, width) / REFERENCE_SIZE
    lo = max(1, int(round(BRUSH_WIDTH_RANGE[0] * scale)))
    hi = max(lo, int(round(BRUSH_WIDTH_RANGE[1] * scale)))
    for _ in range(int(rng.integers(STROKE_COUNT_RANGE[0], STROKE_COUNT_RANGE[1] + 1))):
        brush = int(rng.integers(lo, hi + 1))
        x = float(rng.integers(0, width))
        y = float(rng.integers(0, height))
        angle = rng.uniform(0, 2 * np.pi)
        cv2.circle(mask, (int(x), int(y)), brush // 2, 1, -1)
        for _ in range(int(rng.integers(VERTEX_COUNT_RANGE[0], VERTEX_COUNT_RANGE[1] + 1))):
            angle += rng.uniform(-np.pi / 2, np.pi / 2)
            length = rng.uniform(*SEGMENT_LENGTH_RANGE) * min(height, width)
            nx = float(np.clip(x + length * np.cos(angle), 0, width - 1))
            ny = float(np.clip(y + length * np.sin(angle), 0, height - 1))
            cv2.line(mask, (int(x), int(y)), (int(nx), int(ny)), 1, brush)
            cv2.circle(mask, (int(nx), int(ny)), brush // 2, 1, -1)
            x, y = nx, ny
    return mask


def _extension(rng: np.random.Generator, height: int, width: int, ratio: float | None) -> np.ndarray:
    r = float(rng.uniform(*BAND_RATIO_RANGE)) if ratio is None else _clamp_ratio(ratio)
    mask = np.zeros((height, width), dtype=np.uint8)
    side = int(rng.integers(0, 4))
    if side == 0:
        mask[:, : max(1, round(width * r))] = 1
    elif side == 1:
        mask[:, width - max(1, round(width * r)) :] = 1
    elif side == 2:
        mask[: max(1, round(height * r)), :] = 1
    else:
        mask[height - max(1, round(height * r)) :, :] = 1
    return mask


def _outpainting(rng: np.random.Generator, height: int, width: int, ratio: float | None) -> np.ndarray:
    # ratio = fraction of the frame the mask covers; the kept rectangle is the
    # centered complement.
    r = float(rng.uniform(*BAND_RATIO_RANGE)) if ratio is None else _clamp_ratio(ratio)
    keep = np.sqrt(1.0 - r)
    kh = max(1, round(height * keep))
    kw = max(1, round(width * keep))
    top = (height - kh) // 2
    left = (width - kw) // 2
    mask = np.ones((height, width), dtype=np.uint8)
    mask[top : top + kh, left : left + kw] = 0
    return mask


def _clamp_ratio(ratio: float) -> float:
    # Degenerate requests (e.g. zero margin -> empty mask) are clamped into
    # the supported band instead of producing useless masks.
    return float(np.clip(ratio, *BAND_RATIO_RANGE))


def generate_training_mask(
    kind: MaskKind,
    height: int,
    width: int,
    rng_seed: int,
    *,
    ratio: float | None = None,
) -> np.ndarray:
    """Draw one training mask. `ratio` (extension/outpainting only) is
    clamped into [0.25, 0.5]."""
    if height <= 0 or width <= 0:
        raise ValueError(f"invalid mask size {height}x{width}")
    rng = np.random.default_rng(rng_seed)
    if kind is MaskKind.FREE_FORM:
        return _free_form(rng, height, width)
    if kind is MaskKind.EXTENSION:
        return _extension(rng, height, width, ratio)
    if kind is MaskKind.OUTPAINTING:
        return _outpainting(rng, height, width, ratio)
    raise ValueError(f"unknown mask kind {kind!r}")


def sample_mask_kind(rng: np.random.Generator, mix: dict[MaskKind, float]) -> MaskKind:
    """Draw a mask kind according to a probability mix."""
    kinds = list(mix.keys())
    probs = np.array([mix[k] for k in kinds], dtype=np.float64)
    probs /= probs.sum()
    return kinds[int(rng.choice(len(kinds), p=probs))]
