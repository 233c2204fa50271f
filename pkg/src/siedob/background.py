"""Background synthesis: gated-conv encoder/decoder with self-propagation
blocks in the decoder, a global critic, and a patch critic anchored on the
edit-region boundary so fake patches mix known and generated texture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import spectral_norm

from .errors import DimensionError, TrainingFault, ValidationError
from .losses import Objective, compose_objective, hinge_d_loss, hinge_g_loss, l1_loss, perceptual_loss
from .modulation import GatedConv2d, SaspmBlock

MAX_WIDTH = 512
CRITIC_INPUT_SIDE = 128


@dataclass
class BackgroundGeneratorConfig:
    base_width: int = 64
    num_down: int = 4
    num_saspm: int = 3
    scene_size: int = 256

    def __post_init__(self):
        if self.num_down < 1:
            raise ValidationError("num_down must be >= 1")
        if self.scene_size % (2**self.num_down) != 0:
            raise ValidationError(
                f"scene_size {self.scene_size} not divisible by 2^{self.num_down}"
            )
        if not 0 <= self.num_saspm <= self.num_down:
            raise ValidationError("num_saspm must be in [0, num_down]")


@dataclass
class PatchSpec:
    """Boundary-anchored patch sampling parameters."""

    count: int = 4
    min_size: int = 96
    max_size: int = 160

    def __post_init__(self):
        if not 0 < self.min_size <= self.max_size:
            raise ValidationError(f"bad patch size range [{self.min_size}, {self.max_size}]")

    @classmethod
    def scaled(cls, scene_size: int, count: int = 4) -> "PatchSpec":
        """Reference sizes are 96-160 at 256 resolution; other resolutions
        scale proportionally, rounded to even."""

        def scale(v):
            return max(2, int(round(v * scene_size / 256 / 2)) * 2)

        return cls(count=count, min_size=scale(96), max_size=scale(160))


class BackgroundGenerator(nn.Module):
    """Encoder of strided gated convs; decoder of upsampling gated convs with
    self-propagation blocks at the deepest scales. Output is a full-frame
    tanh image; re-blending with the known region is the caller's job."""

    def __init__(self, config: BackgroundGeneratorConfig, num_classes: int, background_flags):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        flags = torch.as_tensor(background_flags, dtype=torch.bool)
        if flags.shape != (num_classes,):
            raise ValidationError("background_flags must have one entry per class")
        self.register_buffer("background_flags", flags)

        w = config.base_width
        widths = [min(w * 2**i, MAX_WIDTH) for i in range(config.num_down + 1)]
        self.stem = GatedConv2d(3 + num_classes + 1, widths[0], kernel_size=5)
        self.encoder = nn.ModuleList(
            GatedConv2d(widths[i], widths[i + 1], stride=2) for i in range(config.num_down)
        )
        self.mid = GatedConv2d(widths[-1], widths[-1])

        self.saspm_blocks = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in reversed(range(config.num_down)):
            stage = len(self.decoder)
            if stage < config.num_saspm:
                self.saspm_blocks.append(SaspmBlock(widths[i + 1], num_classes))
            else:
                self.saspm_blocks.append(None)
            self.decoder.append(GatedConv2d(widths[i + 1], widths[i]))
        self.head = nn.Conv2d(widths[0], 3, 3, padding=1)

    def forward(self, background_input, seg_onehot, labels, mask):
        """background_input: B x 3 x H x W in [-1, 1] with edited pixels and
        all disassembled object pixels zeroed; seg_onehot: B x L x H x W;
        labels: B x H x W long; mask: B x 1 x H x W (1 = edited)."""
        if background_input.shape[-2:] != mask.shape[-2:]:
            raise DimensionError("background input and mask sizes differ")
        if seg_onehot.shape[1] != self.num_classes:
            raise DimensionError(
                f"expected {self.num_classes} label channels, got {seg_onehot.shape[1]}"
            )
        known = 1.0 - mask[:, 0]
        x = self.stem(torch.cat([background_input, seg_onehot, mask], dim=1))
        for enc in self.encoder:
            x = enc(x)
        x = self.mid(x)
        for block, dec in zip(self.saspm_blocks, self.decoder):
            if block is not None:
                x = block(x, labels, known, self.background_flags)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(x)
        return torch.tanh(self.head(x))


class SpectralPatchCritic(nn.Module):
    """Fully-convolutional hinge critic with spectral-normalized convs.
    Four stride-2 layers, so the score map is input/2^4."""

    def __init__(self, in_channels: int, base_width: int = 64):
        super().__init__()
        widths = [base_width, base_width * 2, base_width * 4, base_width * 4]
        layers = []
        prev = in_channels
        for w in widths:
            layers += [spectral_norm(nn.Conv2d(prev, w, 4, stride=2, padding=1)), nn.LeakyReLU(0.2)]
            prev = w
        layers.append(spectral_norm(nn.Conv2d(prev, 1, 3, stride=1, padding=1)))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def make_global_critic(num_classes: int, base_width: int = 64) -> SpectralPatchCritic:
    """Scene-level critic over the image concatenated with the one-hot map."""
    return SpectralPatchCritic(3 + num_classes, base_width)


def make_boundary_patch_critic(base_width: int = 64) -> SpectralPatchCritic:
    """Patch-level critic; patches are resized to a fixed side before scoring."""
    return SpectralPatchCritic(3, base_width)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Edited pixels with at least one known 4-neighbor, as an N x 2 array of
    (y, x). Pixels on the image border only count if an in-bounds neighbor is
    known, so a full mask has no boundary."""
    m = np.asarray(mask).astype(bool)
    known = ~m
    has_known = np.zeros_like(m)
    has_known[1:, :] |= known[:-1, :]
    has_known[:-1, :] |= known[1:, :]
    has_known[:, 1:] |= known[:, :-1]
    has_known[:, :-1] |= known[:, 1:]
    return np.argwhere(m & has_known)


@dataclass(frozen=True)
class PatchWindow:
    center_y: int  # pre-clamp anchor, always a boundary pixel
    center_x: int
    side: int
    top: int
    left: int


def sample_patch_windows(
    mask: np.ndarray, spec: PatchSpec, rng: np.random.Generator
) -> list[PatchWindow]:
    """Draw square windows centered on boundary pixels; windows are translated
    minimally to fit inside the image. Empty boundary yields an empty list."""
    h, w = mask.shape
    boundary = boundary_pixels(mask)
    if len(boundary) == 0:
        return []
    windows = []
    for _ in range(spec.count):
        cy, cx = boundary[int(rng.integers(len(boundary)))]
        side = int(rng.integers(spec.min_size, spec.max_size + 1))
        side = min(side, h, w)
        top = int(np.clip(cy - side // 2, 0, h - side))
        left = int(np.clip(cx - side // 2, 0, w - side))
        windows.append(PatchWindow(int(cy), int(cx), side, top, left))
    return windows


def sample_boundary_patches(
    image: np.ndarray, mask: np.ndarray, spec: PatchSpec, rng: np.random.Generator
) -> list[np.ndarray]:
    """Crop boundary-anchored square patches out of an H x W x C image."""
    return [
        image[w.top : w.top + w.side, w.left : w.left + w.side]
        for w in sample_patch_windows(mask, spec, rng)
    ]


def _gather_patches(images: torch.Tensor, windows_per_sample, critic_side: int) -> torch.Tensor | None:
    """Crop windows from a batch and resize every patch to the critic input
    side. Returns None when no sample produced windows."""
    crops = []
    for b, windows in enumerate(windows_per_sample):
        for w in windows:
            patch = images[b : b + 1, :, w.top : w.top + w.side, w.left : w.left + w.side]
            if patch.shape[-1] != critic_side:
                patch = F.interpolate(patch, size=(critic_side, critic_side), mode="bilinear", align_corners=False)
            crops.append(patch)
    return torch.cat(crops, dim=0) if crops else None


def blend_known(image: torch.Tensor, generated: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Keep known pixels from the input, take generated ones inside the mask."""
    return image * (1.0 - mask) + generated * mask


def train_background_step(
    batch: dict,
    nets: dict,
    opts: dict,
    weights,
    *,
    pyramid,
    patch_spec: PatchSpec,
    rng: np.random.Generator,
    critic_side: int = CRITIC_INPUT_SIDE,
) -> dict:
    """One alternating critic/generator update. Returns a report of the loss
    parts, the composed total, and the re-blended full-frame L1 used as the
    stage's progress metric."""
    gen, d_global, d_patch = nets["g_b"], nets["d_g"], nets["d_bap"]
    image, seg, labels, mask = batch["image"], batch["seg_onehot"], batch["labels"], batch["mask"]
    bg_input = batch["bg_input"]

    masks_np = mask[:, 0].detach().cpu().numpy() > 0.5
    windows = [sample_patch_windows(masks_np[b], patch_spec, rng) for b in range(image.shape[0])]

    # Critic updates.
    with torch.no_grad():
        blended_d = blend_known(image, gen(bg_input, seg, labels, mask), mask)
    d_real = d_global(torch.cat([image, seg], dim=1))
    d_fake = d_global(torch.cat([blended_d, seg], dim=1))
    loss_d_global = hinge_d_loss(d_real, d_fake)
    opts["d_g"].zero_grad()
    loss_d_global.backward()
    opts["d_g"].step()

    real_patches = _gather_patches(image, windows, critic_side)
    loss_d_patch = torch.zeros((), device=image.device)
    if real_patches is not None:
        fake_patches = _gather_patches(blended_d, windows, critic_side)
        loss_d_patch = hinge_d_loss(d_patch(real_patches), d_patch(fake_patches))
        opts["d_bap"].zero_grad()
        loss_d_patch.backward()
        opts["d_bap"].step()

    # Generator update: reconstruction on the raw full frame, adversarial on
    # the re-blend so fake patches carry real texture outside the mask.
    fake = gen(bg_input, seg, labels, mask)
    blended = blend_known(image, fake, mask)
    parts = {
        "l1": l1_loss(fake, image),
        "perceptual": perceptual_loss(fake, image, pyramid),
        "gan_global": hinge_g_loss(d_global(torch.cat([blended, seg], dim=1))),
    }
    fake_patches_g = _gather_patches(blended, windows, critic_side)
    parts["gan_local"] = (
        hinge_g_loss(d_patch(fake_patches_g))
        if fake_patches_g is not None
        else torch.zeros((), device=image.device)
    )
    total = compose_objective(Objective.BACKGROUND, parts, weights)
    if not torch.isfinite(total):
        raise TrainingFault(f"non-finite background loss: {total}")
    opts["g_b"].zero_grad()
    total.backward()
    opts["g_b"].step()

    report = {k: float(v.detach()) for k, v in parts.items()}
    report["total"] = float(total.detach())
    report["d_global"] = float(loss_d_global.detach())
    report["d_bap"] = float(loss_d_patch.detach())
    # Progress metrics reported in [0, 1] image space (network range is [-1, 1]).
    report["l1_full01"] = float(l1_loss(fake.detach(), image)) / 2.0
    report["l1_blend01"] = float(l1_loss(blended.detach(), image)) / 2.0
    return report
