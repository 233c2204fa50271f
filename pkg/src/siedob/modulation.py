"""Conditional normalization building blocks.

Two families of modulation layers drive the generators: the background
self-propagation block (per-class feature codes averaged over the known
region, broadcast across each class region, then used to scale/shift
instance-normalized features) and the stacked semantic+style block used by
the object generator. Both follow the conv -> IN -> gamma*x + beta -> ReLU
pattern, with gamma/beta produced by a small conv head from the
conditioning map. The gated convolution used throughout the generators
lives here too.

All tensors are batch-first: features B x C x H x W, label maps B x H x W
(long), binary masks B x H x W (float 0/1).
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, ValidationError

STYLE_DIM = 128
PARAM_HEAD_HIDDEN = 64
INSTANCE_NORM_EPS = 1e-5


class CodeTable(NamedTuple):
    """Per-class feature codes. Rows for foreground classes or classes absent
    from the known region are zero and flagged invalid."""

    codes: torch.Tensor  # B x L x C
    valid: torch.Tensor  # B x L bool


def one_hot_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """B x H x W long -> B x L x H x W float one-hot."""
    if labels.dim() != 3:
        raise DimensionError(f"labels must be B x H x W, got {tuple(labels.shape)}")
    return F.one_hot(labels.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def downsample_labels(labels: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor label downsampling (B x H x W long)."""
    if labels.shape[-2:] == tuple(size):
        return labels
    return (
        F.interpolate(labels[:, None].float(), size=size, mode="nearest")
        .squeeze(1)
        .long()
    )


def downsample_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average a binary mask then threshold at 0.5 (B x H x W float)."""
    if mask.shape[-2:] == tuple(size):
        return mask
    avg = F.adaptive_avg_pool2d(mask[:, None].to(torch.get_default_dtype()), size).squeeze(1)
    return (avg >= 0.5).to(mask.dtype if mask.is_floating_point() else torch.get_default_dtype())


def extract_codes(
    feat: torch.Tensor,
    seg_down: torch.Tensor,
    known_down: torch.Tensor,
    background_flags: torch.Tensor,
) -> CodeTable:
    """Mean feature vector per background class over known pixels.

    feat: B x C x H x W; seg_down: B x H x W long at feature resolution;
    known_down: B x H x W with 1 on known pixels; background_flags: L bools,
    True for background classes. Classes with no known pixels (and all
    foreground classes) get a zero row with valid=False.
    """
    if feat.shape[-2:] != seg_down.shape[-2:] or feat.shape[-2:] != known_down.shape[-2:]:
        raise DimensionError(
            f"feature {tuple(feat.shape)} vs seg {tuple(seg_down.shape)} vs known {tuple(known_down.shape)}"
        )
    num_classes = int(background_flags.shape[0])
    onehot = one_hot_labels(seg_down, num_classes).to(feat.dtype)
    weight = onehot * known_down[:, None].to(feat.dtype)
    counts = weight.sum(dim=(2, 3))  # B x L
    sums = torch.einsum("blhw,bchw->blc", weight, feat)
    codes = sums / counts.clamp(min=1.0).unsqueeze(-1)
    valid = (counts > 0) & background_flags.to(feat.device)[None, :]
    codes = codes * valid.unsqueeze(-1).to(feat.dtype)
    return CodeTable(codes=codes, valid=valid)


def broadcast_codes(seg_onehot: torch.Tensor, table: CodeTable | torch.Tensor) -> torch.Tensor:
    """Fill each class region with its code row: the one-hot map (B x L x H x W)
    times the code table (B x L x C) gives the code map B x C x H x W."""
    codes = table.codes if isinstance(table, CodeTable) else table
    if seg_onehot.shape[1] != codes.shape[1]:
        raise DimensionError(
            f"one-hot has {seg_onehot.shape[1]} classes, table has {codes.shape[1]}"
        )
    return torch.einsum("blhw,blc->bchw", seg_onehot.to(codes.dtype), codes)


def make_style_map(code: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Broadcast a style vector over an object mask: zero outside, the code at
    every masked pixel. code: B x D, mask: B x H x W -> B x D x H x W."""
    if code.dim() != 2 or mask.dim() != 3:
        raise DimensionError(f"code {tuple(code.shape)} / mask {tuple(mask.shape)}")
    return code[:, :, None, None] * mask[:, None].to(code.dtype)


class ParamHead(nn.Module):
    """Shared 3x3 conv + ReLU, then sibling 3x3 convs for gamma and beta.
    The gamma conv's bias is initialized at 1 so modulation starts near
    identity; zeroing the head weights and biases gives gamma = beta = 0."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int = PARAM_HEAD_HIDDEN):
        super().__init__()
        self.shared = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.gamma = nn.Conv2d(hidden, out_channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, out_channels, 3, padding=1)
        nn.init.ones_(self.gamma.bias)
        nn.init.zeros_(self.beta.bias)

    def forward(self, cond):
        h = F.relu(self.shared(cond))
        return self.gamma(h), self.beta(h)


class _ModulationStage(nn.Module):
    """conv -> IN -> gamma * x + beta -> ReLU with params from cond."""

    def __init__(self, channels: int, cond_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.InstanceNorm2d(channels, eps=INSTANCE_NORM_EPS, affine=False)
        self.head = ParamHead(cond_channels, channels)

    def forward(self, feat, cond):
        if feat.shape[-2:] != cond.shape[-2:]:
            raise DimensionError(
                f"feature {tuple(feat.shape)} vs condition {tuple(cond.shape)}"
            )
        x = self.norm(self.conv(feat))
        gamma, beta = self.head(cond)
        return F.relu(gamma * x + beta)


class Saspm(nn.Module):
    """Modulate features with a code map of known-region class averages."""

    def __init__(self, channels: int):
        super().__init__()
        self.stage = _ModulationStage(channels, channels)

    def forward(self, feat, code_map):
        return self.stage(feat, code_map)


class SaspmBlock(nn.Module):
    """Full self-propagation block: extract codes from the layer's own input,
    broadcast them over the class regions, then modulate. Codes are recomputed
    on every forward pass at this layer's resolution."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.saspm = Saspm(channels)

    def forward(self, feat, labels, known_mask, background_flags):
        size = feat.shape[-2:]
        seg_down = downsample_labels(labels, size)
        known_down = downsample_mask(known_mask, size).to(feat.dtype)
        table = extract_codes(feat, seg_down, known_down, background_flags)
        code_map = broadcast_codes(one_hot_labels(seg_down, self.num_classes).to(feat.dtype), table)
        return self.saspm(feat, code_map)


class Ssnm(nn.Module):
    """Two stacked modulation stages: class identity first, style second."""

    def __init__(self, channels: int, num_fg_classes: int, style_dim: int = STYLE_DIM):
        super().__init__()
        self.semantic = _ModulationStage(channels, num_fg_classes)
        self.style = _ModulationStage(channels, style_dim)

    def forward(self, feat, sem_map, style_map):
        return self.style(self.semantic(feat, sem_map), style_map)


class GatedConv2d(nn.Module):
    """Convolution gated by a parallel sigmoid branch:
    activation(conv_f(x)) * sigmoid(conv_g(x))."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, activation="elu"):
        super().__init__()
        if stride not in (1, 2):
            raise ValidationError(f"stride must be 1 or 2, got {stride}")
        padding = kernel_size // 2
        self.feature = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding)
        self.gate = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding)
        self.activation = _make_activation(activation)

    def forward(self, x):
        return self.activation(self.feature(x)) * torch.sigmoid(self.gate(x))


def _make_activation(name):
    if name == "elu":
        return nn.ELU()
    if name == "relu":
        return nn.ReLU()
    if name == "lrelu":
        return nn.LeakyReLU(0.2)
    if name == "tanh":
        return nn.Tanh()
    if name == "none" or name is None:
        return nn.Identity()
    raise ValidationError(f"unsupported activation {name!r}")
