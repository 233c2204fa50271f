"""Pipeline configuration.

One JSON-serializable dataclass drives training, evaluation, and serving.
Optimizer defaults (Adam with betas 0.5/0.999, generator lr 1e-4, critic lr
4e-4), loss weights, and the 256 scene / 128 crop resolutions are the
production defaults; CI/desk runs override scene_size=64 and crop_size=32.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .losses import LossWeights


@dataclass
class OptimizerConfig:
    lr_generator: float = 1e-4
    lr_discriminator: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.999

    def __post_init__(self):
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigurationError("learning rates must be > 0")


@dataclass
class PipelineConfig:
    dataset_dir: str = "dataset"
    out_dir: str = "runs/default"
    scene_size: int = 256
    crop_size: int = 128
    seed: int = 0
    dtype: str = "float32"
    batch_size: int = 8

    steps: dict = field(
        default_factory=lambda: {
            "background": 3000,
            "object_inpaint": 2000,
            "object_gen": 2000,
            "fusion": 1000,
        }
    )
    # Optional per-stage early-stop targets on the stage's eval metric.
    stop_l1: dict = field(default_factory=dict)
    eval_every: int = 25
    log_every: int = 1
    checkpoint_every: int = 1000

    tau_vis: float = 0.05
    mask_mix: dict = field(
        default_factory=lambda: {"free_form": 0.6, "extension": 0.2, "outpainting": 0.2}
    )

    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    bg_base_width: int = 64
    bg_num_down: int = 4
    bg_num_saspm: int = 3
    obj_base_width: int = 64
    obj_ssnm_blocks: int = 4
    fusion_base_width: int = 48
    fusion_num_down: int = 3
    critic_base_width: int = 64
    critic_input_side: int = 128
    patch_count: int = 4
    patch_min_size: int | None = None  # default: 96-160 scaled with scene_size
    patch_max_size: int | None = None
    pyramid_seed: int = 1234
    pyramid_base_width: int = 16
    eval_pairs_per_image: int = 5
    eval_max_samples: int = 8

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.seed is None:
            raise ConfigurationError("a fixed seed is required")

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.out_dir) / "checkpoints"

    @property
    def bank_path(self) -> Path:
        return self.checkpoint_dir / "style_bank.sbnk"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        raw = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


def architecture_hash(config: PipelineConfig, num_classes: int, foreground_set) -> str:
    """Hash of everything checkpoint compatibility depends on: network shapes,
    resolutions, dtype, and the dataset's class structure."""
    relevant = {
        "scene_size": config.scene_size,
        "crop_size": config.crop_size,
        "dtype": config.dtype,
        "bg": [config.bg_base_width, config.bg_num_down, config.bg_num_saspm],
        "obj": [config.obj_base_width, config.obj_ssnm_blocks],
        "fusion": [config.fusion_base_width, config.fusion_num_down],
        "critic": [config.critic_base_width, config.critic_input_side],
        "pyramid": [config.pyramid_seed, config.pyramid_base_width],
        "num_classes": num_classes,
        "foreground_set": sorted(foreground_set),
    }
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]
