"""Object synthesis.

Two routes per object: a UNet-style gated-conv inpainter completes partially
visible instances, and a style-diversity generator synthesizes fully hidden
ones from a class silhouette plus a 128-dim style code. Style codes come
from a deterministic encoder; after training, every training instance's code
is persisted into a class-aware bank that inference samples from. All object
classes share one inpainter and one generator; class identity enters only
through the one-hot silhouette channels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, NoStylesError, TrainingFault, ValidationError
from .losses import (
    Objective,
    compose_objective,
    hinge_d_loss,
    hinge_g_loss,
    l1_loss,
    perceptual_loss,
    scc_loss,
)
from .modulation import STYLE_DIM, GatedConv2d, Ssnm, make_style_map

BANK_MAGIC = b"SBNK"
BANK_VERSION = 1


@dataclass
class ObjectGenConfig:
    crop_size: int = 128
    num_fg_classes: int = 2
    ssnm_blocks: int = 4
    base_width: int = 64

    def __post_init__(self):
        if self.crop_size % (2**self.ssnm_blocks) != 0:
            raise ValidationError(
                f"crop_size {self.crop_size} not divisible by 2^{self.ssnm_blocks}"
            )
        if self.num_fg_classes < 1:
            raise ValidationError("need at least one foreground class")


@dataclass(frozen=True)
class StyleCode:
    vector: np.ndarray  # 128 float32
    class_id: int

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32)
        if v.shape != (STYLE_DIM,):
            raise ValidationError(f"style vector must have length {STYLE_DIM}, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("style vector has non-finite entries")
        object.__setattr__(self, "vector", v)


@dataclass
class StyleBank:
    """All training-set style codes grouped by class. Immutable after build;
    sampling is read-only and safe to share across workers."""

    entries: dict[int, np.ndarray] = field(default_factory=dict)  # class_id -> N x 128
    provenance: dict = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def count(self, class_id: int) -> int:
        return int(self.entries.get(class_id, np.empty((0, STYLE_DIM))).shape[0])

    def code_at(self, class_id: int, index: int) -> StyleCode:
        rows = self.entries.get(class_id)
        if rows is None or rows.shape[0] == 0:
            raise NoStylesError(f"no style entries for class {class_id}")
        if not 0 <= index < rows.shape[0]:
            raise ValidationError(
                f"style index {index} out of range for class {class_id} ({rows.shape[0]} entries)"
            )
        return StyleCode(vector=rows[index], class_id=class_id)


def sample_style_index(bank: StyleBank, class_id: int, rng: np.random.Generator) -> int:
    n = bank.count(class_id)
    if n == 0:
        raise NoStylesError(f"no style entries for class {class_id}")
    return int(rng.integers(n))


def sample_style(bank: StyleBank, class_id: int, rng: np.random.Generator) -> StyleCode:
    """Uniform draw from the class's bank entries."""
    return bank.code_at(class_id, sample_style_index(bank, class_id, rng))


def save_style_bank(bank: StyleBank, path: str | Path) -> None:
    """Write the bank (little-endian binary) plus a JSON sidecar with counts
    and provenance."""
    path = Path(path)
    classes = bank.classes()
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<II", BANK_VERSION, len(classes)))
        for c in classes:
            rows = np.ascontiguousarray(bank.entries[c], dtype="<f4")
            f.write(struct.pack("<II", c, rows.shape[0]))
            f.write(rows.tobytes())
    sidecar = {
        "version": BANK_VERSION,
        "counts": {str(c): bank.count(c) for c in classes},
        "provenance": bank.provenance,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_style_bank(path: str | Path) -> StyleBank:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != BANK_MAGIC:
        raise ValidationError(f"{path} is not a style bank (bad magic)")
    version, num_classes = struct.unpack_from("<II", data, 4)
    if version != BANK_VERSION:
        raise ValidationError(f"unsupported bank version {version}")
    offset = 12
    entries = {}
    for _ in range(num_classes):
        class_id, count = struct.unpack_from("<II", data, offset)
        offset += 8
        nbytes = count * STYLE_DIM * 4
        rows = np.frombuffer(data[offset : offset + nbytes], dtype="<f4").reshape(count, STYLE_DIM)
        offset += nbytes
        entries[int(class_id)] = rows.copy()
    provenance = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        provenance = json.loads(sidecar.read_text()).get("provenance", {})
    return StyleBank(entries=entries, provenance=provenance)


class StyleEncoder(nn.Module):
    """Strided conv stack + global average + linear head to a 128-dim code.
    Purely deterministic: no noise injection anywhere."""

    def __init__(self, base_width: int = 64):
        super().__init__()
        w = base_width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(w, 2 * w, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * w, 4 * w, 3, 1, 1),
            nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(4 * w, STYLE_DIM)

    def forward(self, crop):
        h = self.net(crop)
        return self.head(h.mean(dim=(2, 3)))


class ObjectInpainter(nn.Module):
    """UNet-like gated-conv network completing a partially visible object.

    Inputs: the crop content (instance pixels only, holes at -1), the fill
    mask (1 where content must be synthesized), and the class silhouette as
    K one-hot channels. Known pixels are re-blended from the input, so an
    empty fill mask returns the input exactly.
    """

    def __init__(self, config: ObjectGenConfig):
        super().__init__()
        w = max(16, config.base_width // 2)  # lightweight on purpose
        k = config.num_fg_classes
        self.stem = GatedConv2d(3 + 1 + k, w, kernel_size=5)
        self.down1 = GatedConv2d(w, 2 * w, stride=2)
        self.down2 = GatedConv2d(2 * w, 4 * w, stride=2)
        self.mid = GatedConv2d(4 * w, 4 * w)
        self.up1 = GatedConv2d(4 * w + 2 * w, 2 * w)
        self.up2 = GatedConv2d(2 * w + w, w)
        self.head = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, crop_image, fill_mask, class_map):
        if crop_image.shape[-2:] != fill_mask.shape[-2:] or crop_image.shape[-2:] != class_map.shape[-2:]:
            raise DimensionError("inpainter inputs disagree on spatial size")
        e0 = self.stem(torch.cat([crop_image, fill_mask, class_map], dim=1))
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        x = self.mid(e2)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up1(torch.cat([x, e1], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up2(torch.cat([x, e0], dim=1))
        raw = torch.tanh(self.head(x))
        return crop_image * (1.0 - fill_mask) + raw * fill_mask


class StyleObjectGenerator(nn.Module):
    """Decode an object image from a class silhouette and a style code.

    A learned constant block at 1/2^blocks resolution is upsampled through
    stacked semantic+style modulation stages; the silhouette enters as K
    one-hot channels and the style as a code map broadcast over the mask.
    Deterministic given (silhouette, code, weights).
    """

    def __init__(self, config: ObjectGenConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        blocks = config.ssnm_blocks
        widths = [min(4 * w, w * 2 ** (blocks - 1 - i)) for i in range(blocks)] + [w]
        start = config.crop_size // 2**blocks
        self.start = nn.Parameter(torch.randn(1, widths[0], start, start) * 0.1)
        self.stages = nn.ModuleList(
            Ssnm(widths[i], config.num_fg_classes) for i in range(blocks)
        )
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, padding=1) for i in range(blocks)
        )
        self.head = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def forward(self, sem_map, style_vector, mask):
        """sem_map: B x K x H x W silhouette one-hot; style_vector: B x 128;
        mask: B x H x W object silhouette."""
        if sem_map.shape[1] != self.config.num_fg_classes:
            raise DimensionError(
                f"expected {self.config.num_fg_classes} silhouette channels, got {sem_map.shape[1]}"
            )
        b = sem_map.shape[0]
        x = self.start.expand(b, -1, -1, -1)
        for ssnm, conv in zip(self.stages, self.convs):
            size = x.shape[-2:]
            sem_down = F.interpolate(sem_map, size=size, mode="nearest")
            mask_down = F.interpolate(mask[:, None].to(x.dtype), size=size, mode="nearest").squeeze(1)
            x = ssnm(x, sem_down, make_style_map(style_vector, mask_down))
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(conv(x), 0.2)
        return torch.tanh(self.head(x))


def class_silhouette_map(mask: torch.Tensor, fg_index: int, num_fg_classes: int) -> torch.Tensor:
    """B x H x W mask -> B x K x H x W with the silhouette in one channel."""
    b, h, w = mask.shape
    sem = torch.zeros(b, num_fg_classes, h, w, dtype=torch.get_default_dtype(), device=mask.device)
    sem[:, fg_index] = mask.to(sem.dtype)
    return sem


def generate_object(
    generator: StyleObjectGenerator,
    mask: torch.Tensor,
    fg_index: int,
    style: StyleCode,
    expected_class_id: int,
) -> torch.Tensor:
    """Class-checked wrapper: the style code's class must match the instance."""
    if style.class_id != expected_class_id:
        raise ValidationError(
            f"style code is for class {style.class_id}, instance is class {expected_class_id}"
        )
    sem = class_silhouette_map(mask, fg_index, generator.config.num_fg_classes)
    vec = torch.as_tensor(style.vector, dtype=sem.dtype, device=sem.device)[None]
    return generator(sem, vec, mask)


def train_object_inpaint_step(batch, nets, opts, weights, *, pyramid) -> dict:
    """Alternating critic/generator update for the inpainter."""
    gen, critic = nets["g_oi"], nets["d_obj"]
    gt, fill, sem = batch["gt_crop"], batch["fill"], batch["sem_map"]
    erased = gt * (1.0 - fill) - fill  # holes at -1 in network range

    with torch.no_grad():
        fake_d = gen(erased, fill, sem)
    loss_d = hinge_d_loss(
        critic(torch.cat([gt, sem], dim=1)), critic(torch.cat([fake_d, sem], dim=1))
    )
    opts["d_obj"].zero_grad()
    loss_d.backward()
    opts["d_obj"].step()

    out = gen(erased, fill, sem)
    parts = {
        "l1": l1_loss(out, gt),
        "perceptual": perceptual_loss(out, gt, pyramid),
        "gan": hinge_g_loss(critic(torch.cat([out, sem], dim=1))),
    }
    total = compose_objective(Objective.OBJECT_INPAINT, parts, weights)
    if not torch.isfinite(total):
        raise TrainingFault(f"non-finite inpaint loss: {total}")
    opts["g_oi"].zero_grad()
    total.backward()
    opts["g_oi"].step()

    fill_px = fill.sum().clamp(min=1.0)
    # Fill-region L1 reported in [0, 1] image space.
    masked_l1 = ((out.detach() - gt).abs() * fill).sum() / (fill_px * gt.shape[1]) / 2.0
    report = {k: float(v.detach()) for k, v in parts.items()}
    report.update(total=float(total.detach()), d_obj=float(loss_d.detach()), masked_l1=float(masked_l1))
    return report


def train_object_gen_step(batch, nets, opts, weights, *, pyramid) -> dict:
    """Alternating update for the style-diversity generator.

    Two results per sample: one conditioned on the ground-truth crop's own
    code, one on a random same-class crop's code. L1 is applied to the
    ground-truth-styled result only; perceptual, adversarial, and style
    cycle-consistency terms apply to both.
    """
    gen, critic = nets["g_og"], nets["d_obj"]
    enc, enc_cycle = nets["e_s"], nets["e_s_prime"]
    gt, sem, mask, style_crop = batch["gt_crop"], batch["sem_map"], batch["mask"], batch["style_crop"]

    with torch.no_grad():
        r_gt_d = gen(sem, enc(gt), mask)
        r_s_d = gen(sem, enc(style_crop), mask)
    loss_d = hinge_d_loss(
        critic(torch.cat([gt, sem], dim=1)),
        critic(torch.cat([torch.cat([r_gt_d, r_s_d], dim=0), sem.repeat(2, 1, 1, 1)], dim=1)),
    )
    opts["d_obj"].zero_grad()
    loss_d.backward()
    opts["d_obj"].step()

    r_gt = gen(sem, enc(gt), mask)
    r_s = gen(sem, enc(style_crop), mask)
    parts = {
        "l1": l1_loss(r_gt, gt),
        "perceptual_gt": perceptual_loss(r_gt, gt, pyramid),
        "perceptual_sampled": perceptual_loss(r_s, gt, pyramid),
        "gan_gt": hinge_g_loss(critic(torch.cat([r_gt, sem], dim=1))),
        "gan_sampled": hinge_g_loss(critic(torch.cat([r_s, sem], dim=1))),
        "scc_gt": scc_loss(enc_cycle(r_gt), enc_cycle(gt)),
        "scc_sampled": scc_loss(enc_cycle(r_s), enc_cycle(style_crop)),
    }
    total = compose_objective(Objective.OBJECT_GEN, parts, weights)
    if not torch.isfinite(total):
        raise TrainingFault(f"non-finite object-gen loss: {total}")
    opts["g_og"].zero_grad()
    total.backward()
    opts["g_og"].step()

    report = {k: float(v.detach()) for k, v in parts.items()}
    report.update(
        total=float(total.detach()),
        d_obj=float(loss_d.detach()),
        l1_gt01=float(parts["l1"].detach()) / 2.0,
    )
    return report
