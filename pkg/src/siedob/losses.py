"""Training objectives shared by all stages.

Reconstruction (L1), perceptual distance over a frozen feature pyramid,
hinge adversarial terms, style cycle-consistency, and the four weighted
recipes that combine them. The pyramid is a seed-deterministic random conv
stack standing in for a pretrained perceptual backbone; it is explicitly a
proxy (absolute values are not comparable to published perceptual metrics)
and the same instance backs the evaluation metrics so comparisons stay
internally consistent.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError

COSINE_NORM_EPS = 1e-8


@dataclass
class LossWeights:
    """Balance coefficients for the four objectives."""

    perceptual_background: float = 10.0
    perceptual_inpaint: float = 10.0
    perceptual_object: float = 10.0
    perceptual_fusion: float = 10.0
    local_patch_gan: float = 0.2

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"loss weight {f.name} must be >= 0")


class Objective(enum.Enum):
    BACKGROUND = "background"
    OBJECT_INPAINT = "object_inpaint"
    OBJECT_GEN = "object_gen"
    FUSION = "fusion"


class FeaturePyramid(nn.Module):
    """Frozen conv feature extractor with taps at strides 2, 4, and 8.

    Weights are drawn once from a seeded generator and never updated;
    gradients still flow through to the inputs so the perceptual term can
    train generators. `load_state_dict` remains available as the hook for
    swapping in pretrained weights.
    """

    def __init__(self, seed: int = 1234, base_width: int = 16):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [3, base_width, 2 * base_width, 4 * base_width]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(3)
        )
        for conv in self.convs:
            fan_in = conv.in_channels * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in)
                )
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        t1 = F.leaky_relu(self.convs[0](x), 0.2)
        t2 = F.leaky_relu(self.convs[1](t1), 0.2)
        t3 = self.convs[2](t2)
        return t1, t2, t3


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, pyramid: FeaturePyramid) -> torch.Tensor:
    """Sum over the three tap points of mean absolute feature difference."""
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    taps_a = pyramid(a)
    taps_b = pyramid(b)
    return sum((ta - tb).abs().mean() for ta, tb in zip(taps_a, taps_b))


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def scc_loss(code_result: torch.Tensor, code_style: torch.Tensor) -> torch.Tensor:
    """One minus cosine similarity of the re-encoded result and the style
    source embedding; zero-norm inputs are guarded with a small epsilon."""
    a = code_result / code_result.norm(p=2, dim=-1, keepdim=True).clamp(min=COSINE_NORM_EPS)
    b = code_style / code_style.norm(p=2, dim=-1, keepdim=True).clamp(min=COSINE_NORM_EPS)
    return (1.0 - (a * b).sum(dim=-1)).mean()


# Required part names per objective. OBJECT_GEN carries two result branches
# (ground-truth style and sampled style); L1 applies to the gt branch only
# while perceptual/adversarial/cycle terms are summed over both.
_RECIPES = {
    Objective.BACKGROUND: ("l1", "perceptual", "gan_global", "gan_local"),
    Objective.OBJECT_INPAINT: ("l1", "perceptual", "gan"),
    Objective.OBJECT_GEN: (
        "l1",
        "perceptual_gt",
        "perceptual_sampled",
        "gan_gt",
        "gan_sampled",
        "scc_gt",
        "scc_sampled",
    ),
    Objective.FUSION: ("perceptual", "gan"),
}


def compose_objective(which: Objective, parts: Mapping[str, object], weights: LossWeights):
    """Weighted sum of loss parts for one training objective. Extra keys are
    ignored; missing ones raise."""
    missing = [k for k in _RECIPES[which] if k not in parts]
    if missing:
        raise ConfigurationError(f"{which.value} objective missing parts: {missing}")
    p = parts
    if which is Objective.BACKGROUND:
        return (
            p["l1"]
            + weights.perceptual_background * p["perceptual"]
            + p["gan_global"]
            + weights.local_patch_gan * p["gan_local"]
        )
    if which is Objective.OBJECT_INPAINT:
        return p["l1"] + weights.perceptual_inpaint * p["perceptual"] + p["gan"]
    if which is Objective.OBJECT_GEN:
        return (
            p["l1"]
            + weights.perceptual_object * (p["perceptual_gt"] + p["perceptual_sampled"])
            + p["gan_gt"]
            + p["gan_sampled"]
            + p["scc_gt"]
            + p["scc_sampled"]
        )
    if which is Objective.FUSION:
        return weights.perceptual_fusion * p["perceptual"] + p["gan"]
    raise ConfigurationError(f"unknown objective {which!r}")
