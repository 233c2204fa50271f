"""End-to-end orchestration.

Stages are trained independently (background, object inpainting, object
generation, then fusion over frozen upstream outputs); inference runs
erase -> disassemble -> background synthesis -> per-object routing ->
composition -> fusion, with a hard re-blend at the very end so pixels
outside the edit mask always equal the input exactly.
"""

from __future__ import annotations

import csv
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .background import (
    BackgroundGenerator,
    BackgroundGeneratorConfig,
    PatchSpec,
    SpectralPatchCritic,
    make_boundary_patch_critic,
    make_global_critic,
    train_background_step,
)
from .config import PipelineConfig, architecture_hash
from .data import ClassesSpec, SceneDataset, load_classes
from .errors import DimensionError, StageError, ValidationError
from .fusion import FusionConfig, FusionNet, train_fusion_step
from .losses import FeaturePyramid
from .masks import MaskKind, generate_training_mask, sample_mask_kind
from .objects import (
    ObjectGenConfig,
    ObjectInpainter,
    StyleBank,
    StyleEncoder,
    StyleObjectGenerator,
    class_silhouette_map,
    generate_object,
    load_style_bank,
    sample_style_index,
    save_style_bank,
    train_object_gen_step,
    train_object_inpaint_step,
)
from .scene import (
    SegmentationMap,
    SynthesisMode,
    compose,
    crop_object,
    disassemble,
    erase_input,
    instance_records,
)

log = logging.getLogger(__name__)

STAGES = ("background", "object_inpaint", "object_gen", "fusion")
STAGE_NETS = {
    "background": ("g_b", "d_g", "d_bap"),
    "object_inpaint": ("g_oi", "d_obj"),
    "object_gen": ("g_og", "e_s", "e_s_prime", "d_obj"),
    "fusion": ("f_net", "d_f"),
}
GENERATOR_NETS = ("g_b", "g_oi", "g_og", "e_s", "e_s_prime", "f_net")


def to_net(x01):
    """[0, 1] image to the [-1, 1] network range."""
    return x01 * 2.0 - 1.0


def from_net(x):
    return (x + 1.0) / 2.0


def torch_dtype(config: PipelineConfig):
    return torch.float64 if config.dtype == "float64" else torch.float32


def build_networks(config: PipelineConfig, classes: ClassesSpec) -> dict[str, torch.nn.Module]:
    """All networks with seed-deterministic initialization."""
    torch.manual_seed(config.seed)
    num_classes = classes.num_classes
    num_fg = len(classes.foreground_set)
    bg_cfg = BackgroundGeneratorConfig(
        base_width=config.bg_base_width,
        num_down=config.bg_num_down,
        num_saspm=config.bg_num_saspm,
        scene_size=config.scene_size,
    )
    obj_cfg = ObjectGenConfig(
        crop_size=config.crop_size,
        num_fg_classes=num_fg,
        ssnm_blocks=config.obj_ssnm_blocks,
        base_width=config.obj_base_width,
    )
    fus_cfg = FusionConfig(base_width=config.fusion_base_width, num_down=config.fusion_num_down)
    nets = {
        "g_b": BackgroundGenerator(bg_cfg, num_classes, classes.background_flags()),
        "d_g": make_global_critic(num_classes, config.critic_base_width),
        "d_bap": make_boundary_patch_critic(config.critic_base_width),
        "g_oi": ObjectInpainter(obj_cfg),
        "g_og": StyleObjectGenerator(obj_cfg),
        "e_s": StyleEncoder(config.obj_base_width),
        "e_s_prime": StyleEncoder(config.obj_base_width),
        "d_obj": SpectralPatchCritic(3 + num_fg, config.critic_base_width),
        "f_net": FusionNet(fus_cfg, num_classes),
        "d_f": SpectralPatchCritic(3 + num_classes, config.critic_base_width),
    }
    dtype = torch_dtype(config)
    for net in nets.values():
        net.to(dtype)
    return nets


def build_pyramid(config: PipelineConfig) -> FeaturePyramid:
    return FeaturePyramid(config.pyramid_seed, config.pyramid_base_width).to(torch_dtype(config))


def make_optimizers(nets, config: PipelineConfig, stage: str) -> dict:
    betas = (config.optimizer.beta1, config.optimizer.beta2)
    lr_g, lr_d = config.optimizer.lr_generator, config.optimizer.lr_discriminator
    opts = {}
    for name in STAGE_NETS[stage]:
        if name == "g_og":
            params = (
                list(nets["g_og"].parameters())
                + list(nets["e_s"].parameters())
                + list(nets["e_s_prime"].parameters())
            )
            opts["g_og"] = torch.optim.Adam(params, lr=lr_g, betas=betas)
        elif name in ("e_s", "e_s_prime"):
            continue  # trained through the g_og optimizer
        else:
            lr = lr_g if name in GENERATOR_NETS else lr_d
            opts[name] = torch.optim.Adam(nets[name].parameters(), lr=lr, betas=betas)
    return opts


def patch_spec_for(config: PipelineConfig) -> PatchSpec:
    spec = PatchSpec.scaled(config.scene_size, count=config.patch_count)
    if config.patch_min_size is not None or config.patch_max_size is not None:
        spec = PatchSpec(
            count=config.patch_count,
            min_size=config.patch_min_size or spec.min_size,
            max_size=config.patch_max_size or spec.max_size,
        )
    return spec


# ---------------------------------------------------------------------------
# Batch construction


def _mask_mix(config: PipelineConfig) -> dict[MaskKind, float]:
    return {MaskKind(k): float(v) for k, v in config.mask_mix.items()}


def _random_edit_mask(config: PipelineConfig, height, width, rng) -> np.ndarray:
    kind = sample_mask_kind(rng, _mask_mix(config))
    return generate_training_mask(kind, height, width, int(rng.integers(2**31)))


def _scene_to_tensors(sample, classes, mask, config, dtype):
    seg = SegmentationMap(sample.labels, classes.num_classes, classes.foreground_set)
    erased = erase_input(sample.image, mask)
    dec = disassemble(
        erased, seg, mask, sample.instance_map, crop_size=config.crop_size, tau_vis=config.tau_vis
    )
    return {
        "image": torch.as_tensor(to_net(sample.image.transpose(2, 0, 1)), dtype=dtype),
        "seg_onehot": torch.as_tensor(seg.one_hot(), dtype=dtype),
        "labels": torch.as_tensor(sample.labels),
        "mask": torch.as_tensor(mask, dtype=dtype)[None],
        "bg_input": torch.as_tensor(to_net(dec.background_input.transpose(2, 0, 1)), dtype=dtype),
    }


def background_batch(dataset, classes, config, rng, *, indices=None, masks=None) -> dict:
    dtype = torch_dtype(config)
    if indices is None:
        indices = rng.integers(len(dataset), size=config.batch_size)
    items = []
    for j, i in enumerate(indices):
        sample = dataset[int(i)]
        mask = (
            masks[j]
            if masks is not None
            else _random_edit_mask(config, *sample.labels.shape, rng)
        )
        items.append(_scene_to_tensors(sample, classes, mask, config, dtype))
    return {k: torch.stack([it[k] for it in items]) for k in items[0]}


@dataclass(frozen=True)
class InstanceItem:
    sample_index: int
    class_id: int
    fg_index: int
    crop_image01: np.ndarray  # crop_size^2 x 3, instance pixels only
    crop_mask: np.ndarray  # crop_size^2 uint8 silhouette


def instance_catalog(dataset, classes, crop_size: int) -> list[InstanceItem]:
    """Every foreground instance of the dataset as an aligned ground-truth
    crop. Order is deterministic: samples in directory order, instances by
    (class, instance id)."""
    fg = list(classes.foreground_set)
    items = []
    for si in range(len(dataset)):
        sample = dataset[si]
        seg = SegmentationMap(sample.labels, classes.num_classes, classes.foreground_set)
        for record in instance_records(seg, sample.instance_map):
            crop = crop_object(sample.image, record, crop_size, edit_mask=None)
            items.append(
                InstanceItem(
                    sample_index=si,
                    class_id=record.class_id,
                    fg_index=fg.index(record.class_id),
                    crop_image01=crop.image,
                    crop_mask=crop.mask,
                )
            )
    return items


def _partial_fill(silhouette: np.ndarray, tau_vis: float, rng) -> np.ndarray:
    """Random fill mask over a silhouette that keeps the instance partially
    visible (so the item is a valid inpainting example)."""
    size = silhouette.shape[0]
    total = int(silhouette.sum())
    for _ in range(10):
        ff = generate_training_mask(MaskKind.FREE_FORM, size, size, int(rng.integers(2**31)))
        fill = (ff & silhouette).astype(np.uint8)
        visible = total - int(fill.sum())
        if 0 < fill.sum() and visible / total >= tau_vis:
            return fill
    # Fallback: hide the left half of the silhouette.
    fill = silhouette.copy()
    fill[:, size // 2 :] = 0
    return fill.astype(np.uint8)


def object_inpaint_batch(catalog, classes, config, rng, *, indices=None, fills=None) -> dict:
    dtype = torch_dtype(config)
    num_fg = len(classes.foreground_set)
    if indices is None:
        indices = rng.integers(len(catalog), size=config.batch_size)
    gt, sem, fill = [], [], []
    for j, i in enumerate(indices):
        item = catalog[int(i)]
        f = fills[j] if fills is not None else _partial_fill(item.crop_mask, config.tau_vis, rng)
        gt.append(torch.as_tensor(to_net(item.crop_image01.transpose(2, 0, 1)), dtype=dtype))
        mask_t = torch.as_tensor(item.crop_mask, dtype=dtype)[None]
        sem.append(class_silhouette_map(mask_t, item.fg_index, num_fg)[0])
        fill.append(torch.as_tensor(f, dtype=dtype)[None])
    return {"gt_crop": torch.stack(gt), "sem_map": torch.stack(sem), "fill": torch.stack(fill)}


def object_gen_batch(catalog, classes, config, rng, *, indices=None) -> dict:
    dtype = torch_dtype(config)
    num_fg = len(classes.foreground_set)
    by_class: dict[int, list[int]] = {}
    for i, item in enumerate(catalog):
        by_class.setdefault(item.class_id, []).append(i)
    if indices is None:
        indices = rng.integers(len(catalog), size=config.batch_size)
    gt, sem, mask, style = [], [], [], []
    for i in indices:
        item = catalog[int(i)]
        peers = [j for j in by_class[item.class_id] if j != int(i)]
        if peers:
            style_item = catalog[int(rng.choice(peers))]
        else:
            log.warning("class %d has a single instance; using it as its own style image", item.class_id)
            style_item = item
        gt.append(torch.as_tensor(to_net(item.crop_image01.transpose(2, 0, 1)), dtype=dtype))
        mask_t = torch.as_tensor(item.crop_mask, dtype=dtype)
        mask.append(mask_t)
        sem.append(class_silhouette_map(mask_t[None], item.fg_index, num_fg)[0])
        style.append(torch.as_tensor(to_net(style_item.crop_image01.transpose(2, 0, 1)), dtype=dtype))
    return {
        "gt_crop": torch.stack(gt),
        "sem_map": torch.stack(sem),
        "mask": torch.stack(mask),
        "style_crop": torch.stack(style),
    }


# ---------------------------------------------------------------------------
# Scene composition (shared by inference and fusion training)


def compose_scene(
    image01: np.ndarray,
    seg: SegmentationMap,
    mask: np.ndarray,
    instance_map,
    nets,
    bank: StyleBank | None,
    config: PipelineConfig,
    classes: ClassesSpec,
    rng: np.random.Generator,
    style_choices: dict[int, int] | None = None,
):
    """Erase, disassemble, synthesize background and objects, and paste
    everything back. Returns (composite01, decomposition, instance infos)."""
    dtype = torch_dtype(config)
    fg = list(classes.foreground_set)
    num_fg = len(fg)

    erased = erase_input(image01, mask)
    dec = disassemble(
        erased, seg, mask, instance_map, crop_size=config.crop_size, tau_vis=config.tau_vis
    )

    bg_in = torch.as_tensor(to_net(dec.background_input.transpose(2, 0, 1)), dtype=dtype)[None]
    seg_onehot = torch.as_tensor(seg.one_hot(), dtype=dtype)[None]
    labels_t = torch.as_tensor(seg.labels)[None]
    mask_t = torch.as_tensor(mask, dtype=dtype)[None, None]
    gb_out = nets["g_b"](bg_in, seg_onehot, labels_t, mask_t)
    mb = torch.as_tensor(dec.background_mask, dtype=dtype)[None, None]
    composed_bg = bg_in * (1.0 - mb) + gb_out * mb
    composite01 = from_net(composed_bg[0].cpu().numpy().transpose(1, 2, 0))

    pastes = []
    infos = []
    for idx, crop in enumerate(dec.objects):
        rec = crop.record
        fg_index = fg.index(rec.class_id)
        mask_crop = torch.as_tensor(crop.mask, dtype=dtype)[None]
        used_style = None
        if rec.mode is SynthesisMode.INPAINT:
            crop_in = torch.as_tensor(to_net(crop.image.transpose(2, 0, 1)), dtype=dtype)[None]
            fill_t = torch.as_tensor(crop.fill_mask, dtype=dtype)[None, None]
            sem = class_silhouette_map(mask_crop, fg_index, num_fg)
            out = nets["g_oi"](crop_in, fill_t, sem)
        else:
            if bank is None:
                raise StageError("style bank required for fully-masked objects but not loaded")
            if style_choices and idx in style_choices:
                used_style = int(style_choices[idx])
            else:
                used_style = sample_style_index(bank, rec.class_id, rng)
            style = bank.code_at(rec.class_id, used_style)
            out = generate_object(nets["g_og"], mask_crop, fg_index, style, rec.class_id)
        out01 = from_net(out[0].detach().cpu().numpy().transpose(1, 2, 0))
        pastes.append((out01, rec, crop.placement))
        infos.append(
            {
                "instance_index": idx,
                "class_id": rec.class_id,
                "class_name": classes.names[rec.class_id],
                "mode": rec.mode.value,
                "bbox": list(rec.bbox),
                "used_style_index": used_style,
            }
        )
    return compose(composite01, pastes), dec, infos


@dataclass
class EditReport:
    instances: list[dict] = field(default_factory=list)
    timing_ms: float = 0.0


class EditPipeline:
    """Frozen networks + style bank behind the single `edit` entry point.
    Stateless across calls; per-call RNG comes from the caller's seed, so
    concurrent use is safe."""

    def __init__(self, config, classes, nets, bank, pyramid=None):
        self.config = config
        self.classes = classes
        self.nets = nets
        self.bank = bank
        self.pyramid = pyramid or build_pyramid(config)
        for name in GENERATOR_NETS:
            nets[name].eval()

    @classmethod
    def load(cls, config: PipelineConfig, checkpoint_dir: str | Path | None = None) -> "EditPipeline":
        directory = Path(checkpoint_dir) if checkpoint_dir else config.checkpoint_dir
        if not (directory / "classes.json").exists():
            raise StageError(f"checkpoint dir {directory} has no classes.json")
        classes = load_classes(directory)
        arch = architecture_hash(config, classes.num_classes, classes.foreground_set)
        nets = build_networks(config, classes)
        needed = {n: nets[n] for n in ("g_b", "g_oi", "g_og", "f_net")}
        ckpt.load_networks(directory, needed, arch, required=True)
        bank_path = directory / "style_bank.sbnk"
        bank = load_style_bank(bank_path) if bank_path.exists() else None
        return cls(config, classes, nets, bank)

    def checkpoint_hash(self) -> str:
        return architecture_hash(self.config, self.classes.num_classes, self.classes.foreground_set)

    def edit(
        self,
        image01: np.ndarray,
        labels: np.ndarray,
        mask: np.ndarray,
        instance_map=None,
        style_choices: dict[int, int] | None = None,
        seed: int = 0,
    ):
        """Run the full edit. Returns (image01, EditReport); pixels with
        mask=0 equal the input exactly."""
        t0 = time.perf_counter()
        image01 = np.asarray(image01, dtype=np.float32)
        if image01.shape[:2] != labels.shape or labels.shape != mask.shape:
            raise DimensionError(
                f"image {image01.shape[:2]}, labels {labels.shape}, mask {mask.shape} disagree"
            )
        if image01.min() < 0.0 or image01.max() > 1.0:
            raise ValidationError("image values must lie in [0, 1]")
        seg = SegmentationMap(labels, self.classes.num_classes, self.classes.foreground_set)
        if mask.sum() == 0:
            return image01.copy(), EditReport(instances=[], timing_ms=(time.perf_counter() - t0) * 1e3)

        rng = np.random.default_rng(seed)
        dtype = torch_dtype(self.config)
        with torch.no_grad():
            composite01, _, infos = compose_scene(
                image01, seg, mask, instance_map, self.nets, self.bank,
                self.config, self.classes, rng, style_choices,
            )
            comp_t = torch.as_tensor(to_net(composite01.transpose(2, 0, 1)), dtype=dtype)[None]
            seg_onehot = torch.as_tensor(seg.one_hot(), dtype=dtype)[None]
            mask_t = torch.as_tensor(mask, dtype=dtype)[None, None]
            fused = self.nets["f_net"](comp_t, seg_onehot, mask_t)
        out01 = from_net(fused[0].cpu().numpy().transpose(1, 2, 0)).astype(np.float32)
        m3 = mask[..., None].astype(np.float32)
        final = image01 * (1.0 - m3) + out01 * m3
        return final, EditReport(instances=infos, timing_ms=(time.perf_counter() - t0) * 1e3)


# ---------------------------------------------------------------------------
# Stage training


@dataclass
class StageResult:
    stage: str
    steps_run: int
    final_metric: float | None
    stopped_early: bool
    csv_path: Path
    checkpoint_dir: Path


def _fixed_probe_masks(dataset, config):
    rng = np.random.default_rng(config.seed + 7919)
    return [
        _random_edit_mask(config, *dataset[i].labels.shape, rng) for i in range(len(dataset))
    ]


# Stage eval metrics are reported in [0, 1] image space (half the [-1, 1]
# network-range difference).


def _eval_background(nets, probe) -> float:
    """Full-frame L1 of the raw generator output against ground truth."""
    with torch.no_grad():
        fake = nets["g_b"](probe["bg_input"], probe["seg_onehot"], probe["labels"], probe["mask"])
        return float((fake - probe["image"]).abs().mean()) / 2.0


def _eval_inpaint(nets, probe) -> float:
    """L1 over the fill region only."""
    with torch.no_grad():
        gt, fill, sem = probe["gt_crop"], probe["fill"], probe["sem_map"]
        out = nets["g_oi"](gt * (1.0 - fill) - fill, fill, sem)
        fill_px = fill.sum().clamp(min=1.0)
        return float(((out - gt).abs() * fill).sum() / (fill_px * gt.shape[1])) / 2.0


def _eval_object_gen(nets, probe) -> float:
    """Crop L1 of the ground-truth-styled result."""
    with torch.no_grad():
        out = nets["g_og"](probe["sem_map"], nets["e_s"](probe["gt_crop"]), probe["mask"])
        return float((out - probe["gt_crop"]).abs().mean()) / 2.0


def _eval_fusion(nets, probe) -> float:
    with torch.no_grad():
        out = nets["f_net"](probe["composite"], probe["seg_onehot"], probe["mask"])
        return float((out - probe["image"]).abs().mean()) / 2.0


def train_stage(config: PipelineConfig, stage: str, *, max_steps: int | None = None) -> StageResult:
    """Train one stage, logging every step to CSV and checkpointing the
    stage's networks. Honors config.stop_l1[stage] as an early-stop target on
    the stage's fixed-probe metric."""
    if stage not in STAGES:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    dataset = SceneDataset(config.dataset_dir)
    classes = dataset.classes
    arch = architecture_hash(config, classes.num_classes, classes.foreground_set)
    nets = build_networks(config, classes)
    pyramid = build_pyramid(config)
    ckpt_dir = config.checkpoint_dir
    dtype = torch_dtype(config)

    # Resume this stage's networks when present; fusion requires upstream.
    if (ckpt_dir / ckpt.MANIFEST_NAME).exists():
        own = {n: nets[n] for n in STAGE_NETS[stage]}
        ckpt.load_networks(ckpt_dir, own, arch, required=False)
    bank = None
    if stage == "fusion":
        upstream = {n: nets[n] for n in ("g_b", "g_oi", "g_og")}
        if not (ckpt_dir / ckpt.MANIFEST_NAME).exists():
            raise StageError("fusion stage requires trained upstream checkpoints")
        ckpt.load_networks(ckpt_dir, upstream, arch, required=True)
        if not config.bank_path.exists():
            raise StageError("fusion stage requires a built style bank")
        bank = load_style_bank(config.bank_path)

    opts = make_optimizers(nets, config, stage)
    steps = config.steps.get(stage, 0) if max_steps is None else max_steps
    rng = np.random.default_rng(config.seed)
    spec = patch_spec_for(config)

    catalog = None
    if stage in ("object_inpaint", "object_gen"):
        catalog = instance_catalog(dataset, classes, config.crop_size)
        if not catalog:
            raise StageError("dataset has no foreground instances to train object stages on")

    # Fixed evaluation probes (deterministic across runs of the same config).
    probe_rng = np.random.default_rng(config.seed + 104729)
    if stage == "background":
        probe = background_batch(
            dataset, classes, config, probe_rng,
            indices=list(range(len(dataset))), masks=_fixed_probe_masks(dataset, config),
        )
        evaluate = _eval_background
    elif stage == "object_inpaint":
        idx = list(range(len(catalog)))
        fills = [_partial_fill(catalog[i].crop_mask, config.tau_vis, probe_rng) for i in idx]
        probe = object_inpaint_batch(catalog, classes, config, probe_rng, indices=idx, fills=fills)
        evaluate = _eval_inpaint
    elif stage == "object_gen":
        idx = list(range(len(catalog)))
        probe = object_gen_batch(catalog, classes, config, probe_rng, indices=idx)
        evaluate = _eval_object_gen
    else:
        probe_masks = _fixed_probe_masks(dataset, config)
        comps, imgs, segs, msks = [], [], [], []
        with torch.no_grad():
            for i in range(len(dataset)):
                sample = dataset[i]
                seg = SegmentationMap(sample.labels, classes.num_classes, classes.foreground_set)
                comp01, _, _ = compose_scene(
                    sample.image, seg, probe_masks[i], sample.instance_map,
                    nets, bank, config, classes, np.random.default_rng(config.seed + i),
                )
                comps.append(torch.as_tensor(to_net(comp01.transpose(2, 0, 1)), dtype=dtype))
                imgs.append(torch.as_tensor(to_net(sample.image.transpose(2, 0, 1)), dtype=dtype))
                segs.append(torch.as_tensor(seg.one_hot(), dtype=dtype))
                msks.append(torch.as_tensor(probe_masks[i], dtype=dtype)[None])
        probe = {
            "composite": torch.stack(comps),
            "image": torch.stack(imgs),
            "seg_onehot": torch.stack(segs),
            "mask": torch.stack(msks),
        }
        evaluate = _eval_fusion

    log_dir = Path(config.out_dir) / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    csv_path = log_dir / f"{stage}.csv"

    target = config.stop_l1.get(stage)
    stopped_early = False
    final_metric = evaluate(nets, probe) if steps == 0 else None
    writer = None
    steps_run = 0
    with open(csv_path, "w", newline="") as f:
        for step in range(steps):
            if stage == "background":
                batch = background_batch(dataset, classes, config, rng)
                report = train_background_step(
                    batch, nets, opts, config.loss_weights,
                    pyramid=pyramid, patch_spec=spec, rng=rng,
                    critic_side=config.critic_input_side,
                )
            elif stage == "object_inpaint":
                batch = object_inpaint_batch(catalog, classes, config, rng)
                report = train_object_inpaint_step(batch, nets, opts, config.loss_weights, pyramid=pyramid)
            elif stage == "object_gen":
                batch = object_gen_batch(catalog, classes, config, rng)
                report = train_object_gen_step(batch, nets, opts, config.loss_weights, pyramid=pyramid)
            else:
                indices = rng.integers(len(dataset), size=config.batch_size)
                comps, imgs, segs, msks = [], [], [], []
                with torch.no_grad():
                    for i in indices:
                        sample = dataset[int(i)]
                        seg = SegmentationMap(sample.labels, classes.num_classes, classes.foreground_set)
                        m = _random_edit_mask(config, *sample.labels.shape, rng)
                        comp01, _, _ = compose_scene(
                            sample.image, seg, m, sample.instance_map,
                            nets, bank, config, classes, rng,
                        )
                        comps.append(torch.as_tensor(to_net(comp01.transpose(2, 0, 1)), dtype=dtype))
                        imgs.append(torch.as_tensor(to_net(sample.image.transpose(2, 0, 1)), dtype=dtype))
                        segs.append(torch.as_tensor(seg.one_hot(), dtype=dtype))
                        msks.append(torch.as_tensor(m, dtype=dtype)[None])
                batch = {
                    "composite": torch.stack(comps),
                    "image": torch.stack(imgs),
                    "seg_onehot": torch.stack(segs),
                    "mask": torch.stack(msks),
                }
                report = train_fusion_step(batch, nets, opts, config.loss_weights, pyramid=pyramid)

            steps_run = step + 1
            if writer is None:
                writer = csv.DictWriter(f, fieldnames=["step"] + sorted(report))
                writer.writeheader()
            if step % config.log_every == 0:
                writer.writerow({"step": step, **{k: f"{v:.6f}" for k, v in report.items()}})

            if (step + 1) % config.eval_every == 0 or step + 1 == steps:
                final_metric = evaluate(nets, probe)
                if target is not None and final_metric < target:
                    stopped_early = True
                    break
            if (step + 1) % config.checkpoint_every == 0:
                ckpt.save_networks(ckpt_dir, {n: nets[n] for n in STAGE_NETS[stage]}, arch, stage)

    ckpt.save_networks(ckpt_dir, {n: nets[n] for n in STAGE_NETS[stage]}, arch, stage)
    if not (ckpt_dir / "classes.json").exists():
        shutil.copy(Path(config.dataset_dir) / "classes.json", ckpt_dir / "classes.json")
    if final_metric is None:
        final_metric = evaluate(nets, probe)
    log.info("stage %s: %d steps, final metric %.4f", stage, steps_run, final_metric)
    return StageResult(
        stage=stage,
        steps_run=steps_run,
        final_metric=final_metric,
        stopped_early=stopped_early,
        csv_path=csv_path,
        checkpoint_dir=ckpt_dir,
    )


# ---------------------------------------------------------------------------
# Style bank


def build_bank(config: PipelineConfig) -> StyleBank:
    """Encode every training instance with the trained style encoder, persist
    the class-grouped bank, and save per-entry thumbnails next to it."""
    dataset = SceneDataset(config.dataset_dir)
    classes = dataset.classes
    arch = architecture_hash(config, classes.num_classes, classes.foreground_set)
    nets = build_networks(config, classes)
    ckpt.load_networks(config.checkpoint_dir, {"e_s": nets["e_s"]}, arch, required=True)
    enc = nets["e_s"].eval()
    dtype = torch_dtype(config)

    catalog = instance_catalog(dataset, classes, config.crop_size)
    grouped: dict[int, list[np.ndarray]] = {}
    thumbs: dict[int, list[np.ndarray]] = {}
    with torch.no_grad():
        for item in catalog:
            crop = torch.as_tensor(to_net(item.crop_image01.transpose(2, 0, 1)), dtype=dtype)[None]
            code = enc(crop)[0].cpu().float().numpy()
            grouped.setdefault(item.class_id, []).append(code)
            thumbs.setdefault(item.class_id, []).append(item.crop_image01)

    bank = StyleBank(
        entries={c: np.stack(rows).astype(np.float32) for c, rows in grouped.items()},
        provenance={
            "dataset_id": f"{Path(config.dataset_dir).name}:{len(dataset)}",
            "encoder_hash": ckpt.network_checksum(nets["e_s"])[:16],
        },
    )
    config.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    save_style_bank(bank, config.bank_path)
    from .data import save_image_01  # local import to avoid cycle at module load

    thumb_root = config.checkpoint_dir / "style_thumbs"
    for c, crops in thumbs.items():
        d = thumb_root / str(c)
        d.mkdir(parents=True, exist_ok=True)
        for i, crop01 in enumerate(crops):
            save_image_01(d / f"{i}.png", crop01)
    return bank


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(config: PipelineConfig) -> "EvalReport":
    """Desk-scale eval protocol: fixed masks over held-in samples; paired
    perceptual distance, proxy Fréchet distance, and the diversity score."""
    from .metrics import EvalReport, diversity_score, paired_distance, proxy_frechet

    pipeline = EditPipeline.load(config)
    dataset = SceneDataset(config.dataset_dir)
    classes = dataset.classes
    n = min(len(dataset), config.eval_max_samples)
    probe_masks = _fixed_probe_masks(dataset, config)[:n]
    dtype = torch_dtype(config)

    results, gts = [], []
    for i in range(n):
        sample = dataset[i]
        out01, _ = pipeline.edit(sample.image, sample.labels, probe_masks[i], sample.instance_map, seed=i)
        results.append(torch.as_tensor(to_net(out01.transpose(2, 0, 1)), dtype=dtype))
        gts.append(torch.as_tensor(to_net(sample.image.transpose(2, 0, 1)), dtype=dtype))
    results_t, gts_t = torch.stack(results), torch.stack(gts)

    def styled_edit(item, rng):
        i, sample, mask = item
        out01, _ = pipeline.edit(
            sample.image, sample.labels, mask, sample.instance_map, seed=int(rng.integers(2**31))
        )
        return torch.as_tensor(to_net(out01.transpose(2, 0, 1)), dtype=dtype)[None]

    items = [(i, dataset[i], probe_masks[i]) for i in range(n)]
    report = EvalReport(config_hash=pipeline.checkpoint_hash())
    report.add("paired_perceptual", paired_distance(results_t, gts_t, pipeline.pyramid), n)
    if n >= 2:
        report.add("proxy_frechet", proxy_frechet(gts_t, results_t, pipeline.pyramid), n)
    report.add(
        "diversity",
        diversity_score(styled_edit, items, config.eval_pairs_per_image, pipeline.pyramid, config.seed),
        n,
    )
    out_path = Path(config.out_dir) / "eval_report.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(out_path)
    return report
