"""Residual harmonization of the composited scene.

The fusion network predicts a per-pixel offset that is added to the
composite through a skip connection; the residual head is zero-initialized
so an untrained network is exactly the identity on in-range composites.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionError, TrainingFault, ValidationError
from .losses import Objective, compose_objective, hinge_d_loss, hinge_g_loss, perceptual_loss


@dataclass
class FusionConfig:
    base_width: int = 48
    num_down: int = 3

    def __post_init__(self):
        if self.base_width <= 0 or self.num_down < 1:
            raise ValidationError("fusion config values must be positive")


class FusionNet(nn.Module):
    def __init__(self, config: FusionConfig, num_classes: int):
        super().__init__()
        self.config = config
        w = config.base_width
        widths = [min(w * 2**i, 4 * w) for i in range(config.num_down + 1)]
        self.stem = nn.Conv2d(3 + num_classes + 1, widths[0], 5, padding=2)
        self.down = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(config.num_down)
        )
        self.up = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 3, padding=1)
            for i in reversed(range(config.num_down))
        )
        self.head = nn.Conv2d(widths[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, composite, seg_onehot, mask):
        """Output = clamp(composite + residual, -1, 1)."""
        if composite.shape[-2:] != mask.shape[-2:]:
            raise DimensionError("composite and mask sizes differ")
        x = F.leaky_relu(self.stem(torch.cat([composite, seg_onehot, mask], dim=1)), 0.2)
        for conv in self.down:
            x = F.leaky_relu(conv(x), 0.2)
        for conv in self.up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(conv(x), 0.2)
        residual = self.head(x)
        return torch.clamp(composite + residual, -1.0, 1.0)


def train_fusion_step(batch, nets, opts, weights, *, pyramid) -> dict:
    """One critic/generator update; note the objective has no L1 term."""
    fusion, critic = nets["f_net"], nets["d_f"]
    composite, gt, seg, mask = batch["composite"], batch["image"], batch["seg_onehot"], batch["mask"]

    with torch.no_grad():
        fake_d = fusion(composite, seg, mask)
    loss_d = hinge_d_loss(
        critic(torch.cat([gt, seg], dim=1)), critic(torch.cat([fake_d, seg], dim=1))
    )
    opts["d_f"].zero_grad()
    loss_d.backward()
    opts["d_f"].step()

    out = fusion(composite, seg, mask)
    parts = {
        "perceptual": perceptual_loss(out, gt, pyramid),
        "gan": hinge_g_loss(critic(torch.cat([out, seg], dim=1))),
    }
    total = compose_objective(Objective.FUSION, parts, weights)
    if not torch.isfinite(total):
        raise TrainingFault(f"non-finite fusion loss: {total}")
    opts["f_net"].zero_grad()
    total.backward()
    opts["f_net"].step()

    report = {k: float(v.detach()) for k, v in parts.items()}
    report.update(total=float(total.detach()), d_f=float(loss_d.detach()))
    report["l1_out01"] = float((out.detach() - gt).abs().mean()) / 2.0
    return report
