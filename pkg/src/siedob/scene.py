"""Scene disassembly and recomposition.

Splits an edited scene into a background canvas and per-instance object
crops, classifies each object as inpaint-vs-generate, and pastes generated
parts back into place. Everything here is plain numpy over value types, so
the functions are safe to call concurrently; random mask generation lives
in :mod:`siedob.masks`.

Pixel conventions: images are H x W x 3 float arrays in [0, 1]; masks are
H x W uint8 arrays with values in {0, 1}. Mapping to the [-1, 1] network
range happens at network boundaries, not here.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import DimensionError, ValidationError

# Instances with less than this fraction of their pixels visible outside the
# edit mask are re-generated from scratch instead of inpainted.
DEFAULT_VISIBILITY_THRESHOLD = 0.05

# Object crops take the tight bbox, squared up, plus this relative margin.
CROP_MARGIN = 0.10


class SynthesisMode(enum.Enum):
    INPAINT = "inpaint"
    GENERATE = "generate"


@dataclass(frozen=True)
class SegmentationMap:
    """Per-pixel class labels with a designated foreground class subset."""

    labels: np.ndarray
    num_classes: int
    foreground_set: tuple[int, ...]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise DimensionError(f"labels must be H x W, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(
                f"labels outside [0, {self.num_classes}): "
                f"min={labels.min()}, max={labels.max()}"
            )
        for c in self.foreground_set:
            if not 0 <= c < self.num_classes:
                raise ValidationError(f"foreground class {c} outside [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "foreground_set", tuple(sorted(set(self.foreground_set))))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def background_set(self) -> tuple[int, ...]:
        fg = set(self.foreground_set)
        return tuple(c for c in range(self.num_classes) if c not in fg)

    def one_hot(self) -> np.ndarray:
        """L x H x W float32 one-hot expansion (exactly one 1 per pixel)."""
        h, w = self.labels.shape
        onehot = np.zeros((self.num_classes, h, w), dtype=np.float32)
        yy, xx = np.indices((h, w))
        onehot[self.labels, yy, xx] = 1.0
        return onehot


@dataclass(frozen=True)
class Placement:
    """Square window an object crop was taken from, for exact paste-back."""

    top: int
    left: int
    side: int
    out_size: int


@dataclass(frozen=True)
class InstanceRecord:
    class_id: int
    instance_id: int
    mask: np.ndarray
    bbox: tuple[int, int, int, int]  # top, left, height, width
    visible_fraction: float
    mode: SynthesisMode


@dataclass(frozen=True)
class ObjectCrop:
    record: InstanceRecord
    image: np.ndarray  # out_size x out_size x 3
    mask: np.ndarray  # out_size x out_size uint8
    fill_mask: np.ndarray  # out_size x out_size uint8, instance pixels under the edit mask
    placement: Placement


@dataclass(frozen=True)
class SceneDecomposition:
    background_input: np.ndarray  # H x W x 3, objects and edited pixels zeroed
    background_mask: np.ndarray  # H x W uint8, edited pixels not claimed by objects
    objects: tuple[ObjectCrop, ...]


def _check_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"{name} must be H x W, got shape {mask.shape}")
    vals = np.unique(mask)
    if not np.isin(vals, (0, 1)).all():
        raise ValidationError(f"{name} must be binary, found values {vals[:8]}")
    return mask.astype(np.uint8)


def erase_input(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out the edited region: image * (1 - mask), broadcast over channels."""
    image = np.asarray(image, dtype=np.float32)
    mask = _check_mask(mask)
    if image.shape[:2] != mask.shape:
        raise DimensionError(f"image {image.shape[:2]} vs mask {mask.shape}")
    return image * (1 - mask)[..., None]


def classify_mode(
    record: InstanceRecord, mask: np.ndarray, tau_vis: float = DEFAULT_VISIBILITY_THRESHOLD
) -> SynthesisMode:
    """GENERATE when the visible fraction of the instance is below tau_vis."""
    total = int(record.mask.sum())
    if total == 0:
        raise ValidationError("instance mask is empty")
    visible = int(((record.mask == 1) & (mask == 0)).sum())
    return SynthesisMode.GENERATE if visible / total < tau_vis else SynthesisMode.INPAINT


def _tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    top, left = int(ys.min()), int(xs.min())
    return top, left, int(ys.max()) - top + 1, int(xs.max()) - left + 1


def _resize(img: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img.copy()
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.resize(img, (size, size), interpolation=interp)


def crop_window(record: InstanceRecord, image_hw: tuple[int, int]) -> tuple[int, int, int]:
    """Square window (top, left, side) for a record's crop: tight bbox squared
    up with a 10% margin, minimally translated (and if necessary shrunk) to
    fit the image."""
    h_img, w_img = image_hw
    top, left, h, w = record.bbox
    if h <= 0 or w <= 0:
        raise ValidationError(f"degenerate bbox {record.bbox}")
    side = math.ceil(max(h, w) * (1.0 + CROP_MARGIN))
    side = min(side, h_img, w_img)
    cy = top + h / 2.0
    cx = left + w / 2.0
    win_top = int(np.clip(round(cy - side / 2.0), 0, h_img - side))
    win_left = int(np.clip(round(cx - side / 2.0), 0, w_img - side))
    return win_top, win_left, side


def crop_object(
    image_erased: np.ndarray,
    record: InstanceRecord,
    out_size: int,
    edit_mask: np.ndarray | None = None,
) -> ObjectCrop:
    """Cut an aligned square crop for one object.

    The crop image contains only the instance's own pixels (background inside
    the window is zeroed); the crop mask is the instance silhouette and the
    fill mask marks silhouette pixels under the edit mask. Images are
    resampled bilinearly, masks with nearest-neighbor; same-size resampling
    is the exact identity so native-resolution crops round-trip bitwise.
    """
    if out_size <= 0:
        raise ValidationError(f"out_size must be positive, got {out_size}")
    h_img, w_img = image_erased.shape[:2]
    top, left, side = crop_window(record, (h_img, w_img))
    sl = np.s_[top : top + side, left : left + side]
    mask_win = record.mask[sl]
    img_win = image_erased[sl] * mask_win[..., None]
    fill_win = (
        (mask_win & edit_mask[sl]).astype(np.uint8)
        if edit_mask is not None
        else np.zeros_like(mask_win)
    )
    return ObjectCrop(
        record=record,
        image=_resize(img_win.astype(np.float32), out_size, nearest=False),
        mask=_resize(mask_win, out_size, nearest=True),
        fill_mask=_resize(fill_win, out_size, nearest=True),
        placement=Placement(top=top, left=left, side=side, out_size=out_size),
    )


def paste_object(canvas: np.ndarray, crop_image: np.ndarray, record: InstanceRecord, placement: Placement) -> None:
    """Resample a generated crop back to its window and overwrite the canvas
    on the instance mask (in place)."""
    h_img, w_img = canvas.shape[:2]
    top, left, side = placement.top, placement.left, placement.side
    if top < 0 or left < 0 or top + side > h_img or left + side > w_img:
        raise DimensionError(f"placement {placement} outside canvas {canvas.shape[:2]}")
    back = _resize(np.asarray(crop_image, dtype=np.float32), side, nearest=False)
    sl = np.s_[top : top + side, left : left + side]
    sel = record.mask[sl] == 1
    canvas[sl][sel] = back[sel]


def compose(
    background_out: np.ndarray,
    objects: list[tuple[np.ndarray, InstanceRecord, Placement]],
) -> np.ndarray:
    """Paste generated object crops over the background, largest instance
    first so smaller (typically occluding) instances win overlaps."""
    canvas = np.array(background_out, dtype=np.float32, copy=True)
    order = sorted(
        range(len(objects)),
        key=lambda i: (-int(objects[i][1].mask.sum()), objects[i][1].class_id, objects[i][1].instance_id),
    )
    for i in order:
        crop_image, record, placement = objects[i]
        paste_object(canvas, crop_image, record, placement)
    return canvas


def _instance_masks(
    seg: SegmentationMap, instance_map: np.ndarray | None
) -> list[tuple[int, int, np.ndarray]]:
    """All foreground instances as (class_id, instance_id, mask)."""
    out = []
    if instance_map is not None:
        instance_map = np.asarray(instance_map)
        if instance_map.shape != seg.shape:
            raise DimensionError(f"instance map {instance_map.shape} vs seg {seg.shape}")
        fg = np.isin(seg.labels, seg.foreground_set)
        for q in np.unique(instance_map[fg & (instance_map > 0)]):
            id_pixels = instance_map == q
            classes = np.unique(seg.labels[id_pixels & fg])
            if len(classes) > 1:
                raise ValidationError(f"instance id {q} spans classes {classes.tolist()}")
            c = int(classes[0])
            out.append((c, int(q), (id_pixels & (seg.labels == c)).astype(np.uint8)))
    else:
        # No instance map: fall back to 4-connected components per class.
        for c in seg.foreground_set:
            class_mask = (seg.labels == c).astype(np.uint8)
            if not class_mask.any():
                continue
            n, comp = cv2.connectedComponents(class_mask, connectivity=4)
            for q in range(1, n):
                out.append((c, q, (comp == q).astype(np.uint8)))
    out.sort(key=lambda t: (t[0], t[1]))
    return out


def instance_records(seg: SegmentationMap, instance_map: np.ndarray | None = None) -> list[InstanceRecord]:
    """All foreground instances of a scene, independent of any edit mask.
    Useful for building crop catalogs and style banks from clean images;
    records carry visible_fraction 1.0 and the INPAINT placeholder mode."""
    records = []
    for class_id, instance_id, inst_mask in _instance_masks(seg, instance_map):
        if not inst_mask.any():
            continue
        records.append(
            InstanceRecord(
                class_id=class_id,
                instance_id=instance_id,
                mask=inst_mask,
                bbox=_tight_bbox(inst_mask),
                visible_fraction=1.0,
                mode=SynthesisMode.INPAINT,
            )
        )
    return records


def disassemble(
    image_erased: np.ndarray,
    seg: SegmentationMap,
    mask: np.ndarray,
    instance_map: np.ndarray | None = None,
    *,
    crop_size: int = 128,
    tau_vis: float = DEFAULT_VISIBILITY_THRESHOLD,
) -> SceneDecomposition:
    """Split an erased scene into background input and per-object crops.

    Returned objects are all foreground instances that intersect the edit
    mask; the background mask is the rest of the edited region. The instance
    masks may extend outside the edit mask (visible parts are inpainting
    context) but never overlap the background mask.
    """
    mask = _check_mask(mask, "edit mask")
    image_erased = np.asarray(image_erased, dtype=np.float32)
    if image_erased.shape[:2] != seg.shape or mask.shape != seg.shape:
        raise DimensionError(
            f"inconsistent sizes: image {image_erased.shape[:2]}, seg {seg.shape}, mask {mask.shape}"
        )

    crops = []
    union = np.zeros(seg.shape, dtype=np.uint8)
    for class_id, instance_id, inst_mask in _instance_masks(seg, instance_map):
        if not (inst_mask & mask).any():
            continue
        total = int(inst_mask.sum())
        visible = int(((inst_mask == 1) & (mask == 0)).sum())
        record = InstanceRecord(
            class_id=class_id,
            instance_id=instance_id,
            mask=inst_mask,
            bbox=_tight_bbox(inst_mask),
            visible_fraction=visible / total,
            mode=SynthesisMode.GENERATE if visible / total < tau_vis else SynthesisMode.INPAINT,
        )
        union |= inst_mask
        crops.append(crop_object(image_erased, record, crop_size, edit_mask=mask))

    background_mask = (mask & (1 - union)).astype(np.uint8)
    background_input = image_erased * (1 - union)[..., None]
    return SceneDecomposition(
        background_input=background_input,
        background_mask=background_mask,
        objects=tuple(crops),
    )
