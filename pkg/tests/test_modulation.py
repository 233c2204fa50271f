import numpy as np
import pytest
import torch

from conftest import gradcheck_against_fd
from siedob.errors import DimensionError, ValidationError
from siedob.modulation import (
    CodeTable,
    GatedConv2d,
    Saspm,
    SaspmBlock,
    Ssnm,
    broadcast_codes,
    downsample_labels,
    downsample_mask,
    extract_codes,
    make_style_map,
    one_hot_labels,
)


def random_onehot(rng, num_classes, h, w):
    labels = torch.from_numpy(rng.integers(0, num_classes, size=(1, h, w)))
    return one_hot_labels(labels, num_classes), labels


# --- code extraction / broadcast ---------------------------------------------


def test_broadcast_matches_pixel_lookup(rng):
    for _ in range(10):
        num_classes, h, w, c = 5, 6, 7, 3
        onehot, labels = random_onehot(rng, num_classes, h, w)
        codes = torch.from_numpy(rng.standard_normal((1, num_classes, c))).float()
        out = broadcast_codes(onehot, codes)
        for y in range(h):
            for x in range(w):
                expected = codes[0, labels[0, y, x]]
                assert torch.allclose(out[0, :, y, x], expected, atol=1e-6)


def test_broadcast_single_class_constant(rng):
    onehot = one_hot_labels(torch.zeros(1, 4, 4, dtype=torch.long), 3)
    codes = torch.from_numpy(rng.standard_normal((1, 3, 8))).float()
    out = broadcast_codes(onehot, codes)
    assert torch.allclose(out, codes[0, 0][None, :, None, None].expand(1, 8, 4, 4))


def test_broadcast_zero_table_gives_zero():
    onehot = one_hot_labels(torch.zeros(1, 4, 4, dtype=torch.long), 3)
    assert broadcast_codes(onehot, torch.zeros(1, 3, 8)).abs().sum() == 0


def test_extract_matches_masked_mean_loop(rng):
    num_classes, h, w, c = 4, 4, 4, 5
    feat = torch.from_numpy(rng.standard_normal((1, c, h, w))).float()
    labels = torch.from_numpy(rng.integers(0, num_classes, size=(1, h, w)))
    known = torch.from_numpy((rng.random((1, h, w)) < 0.6).astype(np.float32))
    background = torch.tensor([True, True, False, True])
    table = extract_codes(feat, labels, known, background)
    for cls in range(num_classes):
        pixels = [
            feat[0, :, y, x]
            for y in range(h)
            for x in range(w)
            if labels[0, y, x] == cls and known[0, y, x] == 1
        ]
        if not background[cls] or not pixels:
            assert table.codes[0, cls].abs().sum() == 0
            assert not table.valid[0, cls]
        else:
            expected = torch.stack(pixels).mean(dim=0)
            assert torch.allclose(table.codes[0, cls], expected, atol=1e-6)
            assert table.valid[0, cls]


def test_extract_constant_region_returns_value():
    feat = torch.zeros(1, 3, 4, 4)
    feat[0, :, :2] = torch.tensor([1.0, 2.0, 3.0])[:, None, None]
    labels = torch.zeros(1, 4, 4, dtype=torch.long)
    labels[0, 2:] = 1
    known = torch.ones(1, 4, 4)
    table = extract_codes(feat, labels, known, torch.tensor([True, True]))
    assert torch.allclose(table.codes[0, 0], torch.tensor([1.0, 2.0, 3.0]))


def test_extract_then_broadcast_reproduces_classwise_constant(rng):
    # When features are constant per class, broadcasting the extracted codes
    # reproduces the features on known background pixels.
    num_classes, c = 3, 4
    labels = torch.from_numpy(rng.integers(0, num_classes, size=(1, 6, 6)))
    values = torch.from_numpy(rng.standard_normal((num_classes, c))).float()
    feat = values[labels[0]].permute(2, 0, 1)[None]
    known = torch.from_numpy((rng.random((1, 6, 6)) < 0.5).astype(np.float32))
    background = torch.tensor([True] * num_classes)
    table = extract_codes(feat, labels, known, background)
    restored = broadcast_codes(one_hot_labels(labels, num_classes), table)
    sel = (known[0] == 1) & table.valid[0][labels[0]]
    assert torch.allclose(
        restored[0].permute(1, 2, 0)[sel], feat[0].permute(1, 2, 0)[sel], atol=1e-6
    )


def test_extract_empty_known_region_all_invalid(rng):
    feat = torch.randn(1, 3, 4, 4)
    labels = torch.zeros(1, 4, 4, dtype=torch.long)
    table = extract_codes(feat, labels, torch.zeros(1, 4, 4), torch.tensor([True, True]))
    assert not table.valid.any()
    assert table.codes.abs().sum() == 0


# --- modulation layers --------------------------------------------------------


def _zero_head(head):
    for conv in (head.shared, head.gamma, head.beta):
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.zeros_(conv.bias)


def test_saspm_zeroed_heads_give_zero(rng):
    layer = Saspm(channels=4)
    _zero_head(layer.stage.head)
    feat = torch.from_numpy(rng.standard_normal((1, 4, 6, 6))).float()
    code_map = torch.from_numpy(rng.standard_normal((1, 4, 6, 6))).float()
    assert layer(feat, code_map).abs().sum() == 0


def test_saspm_output_nonnegative(rng):
    layer = Saspm(channels=6)
    feat = torch.from_numpy(rng.standard_normal((2, 6, 8, 8))).float()
    code = torch.from_numpy(rng.standard_normal((2, 6, 8, 8))).float()
    assert (layer(feat, code) >= 0).all()


def test_ssnm_zeroed_heads_give_zero(rng):
    layer = Ssnm(channels=4, num_fg_classes=2, style_dim=8)
    _zero_head(layer.style.head)
    feat = torch.from_numpy(rng.standard_normal((1, 4, 4, 4))).float()
    sem = one_hot_labels(torch.zeros(1, 4, 4, dtype=torch.long), 2)
    style = torch.from_numpy(rng.standard_normal((1, 8, 4, 4))).float()
    assert layer(feat, sem, style).abs().sum() == 0


def test_ssnm_distinguishes_styles(rng):
    layer = Ssnm(channels=8, num_fg_classes=2, style_dim=16)
    feat = torch.from_numpy(rng.standard_normal((1, 8, 8, 8))).float()
    sem = one_hot_labels(torch.zeros(1, 8, 8, dtype=torch.long), 2)
    s1 = torch.from_numpy(rng.standard_normal((1, 16, 8, 8))).float()
    s2 = torch.from_numpy(rng.standard_normal((1, 16, 8, 8))).float()
    out1, out2 = layer(feat, sem, s1), layer(feat, sem, s2)
    assert (out1 - out2).abs().mean() > 0
    assert (out1 >= 0).all() and (out2 >= 0).all()


def test_instance_norm_standardizes_per_channel(rng):
    layer = Saspm(channels=5)
    x = torch.from_numpy(rng.standard_normal((2, 5, 16, 16))).float() * 3 + 1
    normalized = layer.stage.norm(x)
    mean = normalized.mean(dim=(2, 3))
    var = normalized.var(dim=(2, 3), unbiased=False)
    assert mean.abs().max() < 1e-4
    assert (var - 1).abs().max() < 1e-4


def test_saspm_shape_mismatch_raises(rng):
    layer = Saspm(channels=4)
    with pytest.raises(DimensionError):
        layer(torch.randn(1, 4, 6, 6), torch.randn(1, 4, 3, 3))


# --- style maps ----------------------------------------------------------------


def test_style_map_empty_mask_zero(rng):
    code = torch.from_numpy(rng.standard_normal((1, 128))).float()
    assert make_style_map(code, torch.zeros(1, 5, 5)).abs().sum() == 0


def test_style_map_basis_vector():
    code = torch.zeros(1, 128)
    code[0, 7] = 1.0
    out = make_style_map(code, torch.ones(1, 3, 3))
    assert torch.equal(out[0, 7], torch.ones(3, 3))
    assert out[0, :7].abs().sum() == 0 and out[0, 8:].abs().sum() == 0


def test_style_map_matches_elementwise_loop(rng):
    code = torch.from_numpy(rng.standard_normal((1, 16))).float()
    mask = torch.from_numpy((rng.random((1, 4, 5)) < 0.5).astype(np.float32))
    out = make_style_map(code, mask)
    for y in range(4):
        for x in range(5):
            expected = code[0] if mask[0, y, x] == 1 else torch.zeros(16)
            assert torch.equal(out[0, :, y, x], expected)


# --- gated convolution ----------------------------------------------------------


def test_gated_conv_saturated_gate_passes_feature(rng):
    layer = GatedConv2d(3, 4, activation="elu")
    torch.nn.init.zeros_(layer.gate.weight)
    torch.nn.init.constant_(layer.gate.bias, 20.0)
    x = torch.from_numpy(rng.standard_normal((1, 3, 6, 6))).float()
    out = layer(x)
    expected = torch.nn.functional.elu(layer.feature(x))
    assert torch.allclose(out, expected, atol=1e-6)


def test_gated_conv_closed_gate_blocks(rng):
    layer = GatedConv2d(3, 4)
    torch.nn.init.zeros_(layer.gate.weight)
    torch.nn.init.constant_(layer.gate.bias, -20.0)
    x = torch.from_numpy(rng.standard_normal((1, 3, 6, 6))).float()
    assert layer(x).abs().max() < 1e-6


def test_gated_conv_matches_hand_rolled_oracle(rng):
    layer = GatedConv2d(2, 3, activation="relu")
    x = torch.from_numpy(rng.standard_normal((1, 2, 5, 5))).float()
    out = layer(x)
    oracle = torch.relu(layer.feature(x)) * torch.sigmoid(layer.gate(x))
    assert torch.equal(out, oracle)


def test_gated_conv_rejects_bad_stride():
    with pytest.raises(ValidationError):
        GatedConv2d(3, 3, stride=3)


# --- downsampling helpers --------------------------------------------------------


def test_downsample_labels_nearest():
    labels = torch.arange(16).reshape(1, 4, 4) % 3
    down = downsample_labels(labels, (2, 2))
    assert down.shape == (1, 2, 2)
    assert down.dtype == torch.long


def test_downsample_mask_threshold():
    mask = torch.zeros(1, 4, 4)
    mask[0, :2, :2] = 1.0  # one quadrant fully on
    down = downsample_mask(mask, (2, 2))
    assert down[0, 0, 0] == 1 and down[0].sum() == 1


# --- gradient checks (finite differences, double precision) ---------------------


def test_saspm_gradients_match_finite_differences(rng):
    torch.manual_seed(3)
    layer = Saspm(channels=4).double()
    feat = torch.from_numpy(rng.standard_normal((1, 4, 4, 4)))
    code = torch.from_numpy(rng.standard_normal((1, 4, 4, 4)))
    probe = torch.from_numpy(rng.standard_normal((1, 4, 4, 4)))
    weights = [layer.stage.conv.weight, layer.stage.head.gamma.weight]

    def objective():
        return (layer(feat, code) * probe).sum()

    gradcheck_against_fd(objective, [feat, code] + weights)


def test_ssnm_gradients_match_finite_differences(rng):
    torch.manual_seed(4)
    layer = Ssnm(channels=3, num_fg_classes=2, style_dim=4).double()
    feat = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
    sem = one_hot_labels(torch.zeros(1, 4, 4, dtype=torch.long), 2).double()
    style = torch.from_numpy(rng.standard_normal((1, 4, 4, 4)))
    probe = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))

    def objective():
        return (layer(feat, sem, style) * probe).sum()

    gradcheck_against_fd(objective, [feat, style, layer.semantic.conv.weight])


def test_gated_conv_gradients_match_finite_differences(rng):
    torch.manual_seed(5)
    layer = GatedConv2d(2, 3, activation="elu").double()
    x = torch.from_numpy(rng.standard_normal((1, 2, 4, 4)))
    probe = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))

    def objective():
        return (layer(x) * probe).sum()

    gradcheck_against_fd(objective, [x, layer.feature.weight, layer.gate.weight])


def test_saspm_block_end_to_end(rng):
    block = SaspmBlock(channels=4, num_classes=3)
    feat = torch.from_numpy(rng.standard_normal((2, 4, 8, 8))).float()
    labels = torch.from_numpy(rng.integers(0, 3, size=(2, 16, 16)))
    known = torch.from_numpy((rng.random((2, 16, 16)) < 0.5).astype(np.float32))
    out = block(feat, labels, known, torch.tensor([True, True, False]))
    assert out.shape == feat.shape
    assert (out >= 0).all()
