import numpy as np
import pytest

from siedob.masks import MaskKind, generate_training_mask, sample_mask_kind


def test_same_seed_is_deterministic():
    for kind in MaskKind:
        a = generate_training_mask(kind, 64, 64, rng_seed=7)
        b = generate_training_mask(kind, 64, 64, rng_seed=7)
        assert np.array_equal(a, b)


def test_different_seeds_differ():
    a = generate_training_mask(MaskKind.FREE_FORM, 64, 64, 1)
    b = generate_training_mask(MaskKind.FREE_FORM, 64, 64, 2)
    assert not np.array_equal(a, b)


def test_masks_are_binary():
    for kind in MaskKind:
        m = generate_training_mask(kind, 48, 80, 3)
        assert m.shape == (48, 80)
        assert set(np.unique(m)) <= {0, 1}


def test_outpainting_ratio_lower_bound_enforced():
    # A zero-margin request would give an empty mask; the ratio is clamped to
    # the 25% lower bound instead.
    m = generate_training_mask(MaskKind.OUTPAINTING, 64, 64, 0, ratio=0.0)
    assert m.sum() > 0
    assert 0.15 <= m.mean() <= 0.35
    m_hi = generate_training_mask(MaskKind.OUTPAINTING, 64, 64, 0, ratio=1.0)
    assert m_hi.mean() <= 0.60  # clamped at 50% (plus rounding)


def test_outpainting_is_frame_around_centered_rect():
    m = generate_training_mask(MaskKind.OUTPAINTING, 64, 64, 5)
    inner = m[16:48, 16:48]
    assert m[0, :].all() and m[-1, :].all() and m[:, 0].all() and m[:, -1].all()
    assert inner.mean() < 1.0  # some kept pixels in the middle
    ys, xs = np.nonzero(1 - m)
    kept_h = ys.max() - ys.min() + 1
    kept_w = xs.max() - xs.min() + 1
    assert kept_h * kept_w == (1 - m).sum()  # kept region is a solid rectangle


def test_extension_band_covers_one_side():
    for seed in range(8):
        m = generate_training_mask(MaskKind.EXTENSION, 64, 64, seed)
        cov = m.mean()
        assert 0.24 <= cov <= 0.51
        full_rows = (m.sum(axis=1) == 64).sum()
        full_cols = (m.sum(axis=0) == 64).sum()
        assert full_rows == 0 or full_cols == 0 or full_rows == 64 or full_cols == 64
        # Band anchored at an edge.
        assert m[0, 0] == 1 or m[-1, -1] == 1 or m[0, -1] == 1 or m[-1, 0] == 1


def test_free_form_mean_coverage_band():
    cov = [
        generate_training_mask(MaskKind.FREE_FORM, 256, 256, seed).mean() for seed in range(200)
    ]
    assert 0.10 <= float(np.mean(cov)) <= 0.60


def test_invalid_size_raises():
    with pytest.raises(ValueError):
        generate_training_mask(MaskKind.FREE_FORM, 0, 64, 1)


def test_sample_mask_kind_respects_mix(rng):
    mix = {MaskKind.FREE_FORM: 1.0, MaskKind.EXTENSION: 0.0, MaskKind.OUTPAINTING: 0.0}
    kinds = {sample_mask_kind(rng, mix) for _ in range(20)}
    assert kinds == {MaskKind.FREE_FORM}
