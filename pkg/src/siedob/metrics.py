"""Desk-scale evaluation metrics.

All three metrics run over the same frozen feature pyramid that backs the
perceptual loss, so relative comparisons are internally consistent. They are
proxies: absolute values are not comparable to published numbers computed
with pretrained backbones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionError, ValidationError
from .losses import FeaturePyramid, perceptual_loss

COV_JITTER = 1e-6


def _sqrtm_trace(mat: np.ndarray) -> float:
    """Trace of the symmetric PSD square root via eigendecomposition;
    negative eigenvalues from numerical noise are clipped at zero."""
    vals = np.linalg.eigvalsh((mat + mat.T) / 2.0)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (N x D).

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross term
    evaluated through the symmetric form S_b^{1/2} S_a S_b^{1/2}. Covariances
    get a small diagonal jitter so near-singular fits stay stable.
    """
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim != 2 or feats_b.ndim != 2 or feats_a.shape[1] != feats_b.shape[1]:
        raise DimensionError(f"feature sets disagree: {feats_a.shape} vs {feats_b.shape}")
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise ValidationError("need at least 2 samples per set")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    dim = feats_a.shape[1]
    cov_a = np.cov(feats_a, rowvar=False).reshape(dim, dim) + COV_JITTER * np.eye(dim)
    cov_b = np.cov(feats_b, rowvar=False).reshape(dim, dim) + COV_JITTER * np.eye(dim)
    root_b = _sqrtm_psd(cov_b)
    cross = _sqrtm_trace(root_b @ cov_a @ root_b)
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(d, 0.0) if abs(d) < 1e-9 else d


def pooled_features(images: torch.Tensor, pyramid: FeaturePyramid) -> np.ndarray:
    """Global-average-pooled pyramid taps, concatenated: N x D feature rows."""
    with torch.no_grad():
        taps = pyramid(images)
        rows = torch.cat([t.mean(dim=(2, 3)) for t in taps], dim=1)
    return rows.cpu().double().numpy()


def proxy_frechet(real_images: torch.Tensor, fake_images: torch.Tensor, pyramid: FeaturePyramid) -> float:
    """Fréchet distance over pooled pyramid features of two image sets."""
    return frechet_distance(pooled_features(real_images, pyramid), pooled_features(fake_images, pyramid))


def paired_distance(results: torch.Tensor, ground_truths: torch.Tensor, pyramid: FeaturePyramid) -> float:
    """Mean perceptual distance over aligned (result, ground truth) pairs."""
    if results.shape[0] != ground_truths.shape[0]:
        raise DimensionError(f"pair counts differ: {results.shape[0]} vs {ground_truths.shape[0]}")
    with torch.no_grad():
        dists = [
            float(perceptual_loss(results[i : i + 1], ground_truths[i : i + 1], pyramid))
            for i in range(results.shape[0])
        ]
    return float(np.mean(dists))


def diversity_score(edit_fn, test_items, pairs_per_image: int, pyramid: FeaturePyramid, seed: int) -> float:
    """Average perceptual distance between independently re-styled results.

    For each test item, `pairs_per_image` ordered pairs of results are drawn
    by calling `edit_fn(item, rng)` twice per pair; the per-item mean pair
    distance is averaged over items. A pipeline forced to a single style
    yields exactly zero.
    """
    if pairs_per_image < 1:
        raise ValidationError("pairs_per_image must be >= 1")
    rng = np.random.default_rng(seed)
    per_item = []
    for item in test_items:
        dists = []
        for _ in range(pairs_per_image):
            a = edit_fn(item, rng)
            b = edit_fn(item, rng)
            with torch.no_grad():
                dists.append(float(perceptual_loss(a, b, pyramid)))
        per_item.append(float(np.mean(dists)))
    return float(np.mean(per_item))


@dataclass
class EvalReport:
    config_hash: str
    metrics: dict[str, dict] = field(default_factory=dict)

    def add(self, name: str, value: float, sample_count: int) -> None:
        if sample_count <= 0:
            raise ValidationError(f"metric {name} reported with sample_count {sample_count}")
        self.metrics[name] = {"value": float(value), "sample_count": int(sample_count)}

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash, "metrics": self.metrics}, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())
