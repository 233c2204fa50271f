import numpy as np
import pytest

from siedob.errors import DimensionError, ValidationError
from siedob.scene import (
    SegmentationMap,
    SynthesisMode,
    classify_mode,
    compose,
    crop_object,
    crop_window,
    disassemble,
    erase_input,
    instance_records,
    paste_object,
)


def simple_seg(labels, fg=(2, 3), num_classes=4):
    return SegmentationMap(labels=np.asarray(labels), num_classes=num_classes, foreground_set=fg)


def test_erase_zero_mask_is_identity(rng):
    img = rng.random((8, 8, 3)).astype(np.float32)
    out = erase_input(img, np.zeros((8, 8), np.uint8))
    assert np.array_equal(out, img)


def test_erase_full_mask_zeroes(rng):
    img = rng.random((8, 8, 3)).astype(np.float32)
    assert np.array_equal(erase_input(img, np.ones((8, 8), np.uint8)), np.zeros_like(img))


def test_erase_matches_elementwise_oracle(rng):
    img = rng.random((8, 8, 3)).astype(np.float32)
    mask = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    out = erase_input(img, mask)
    expected = np.empty_like(img)
    for y in range(8):
        for x in range(8):
            for c in range(3):
                expected[y, x, c] = img[y, x, c] * (1 - mask[y, x])
    assert np.array_equal(out, expected)


def test_erase_is_idempotent(rng):
    for _ in range(10):
        img = rng.random((12, 9, 3)).astype(np.float32)
        mask = (rng.random((12, 9)) < 0.4).astype(np.uint8)
        once = erase_input(img, mask)
        assert np.array_equal(erase_input(once, mask), once)


def test_erase_size_mismatch_raises(rng):
    with pytest.raises(DimensionError):
        erase_input(rng.random((8, 8, 3)), np.zeros((4, 4), np.uint8))


def test_segmentation_map_one_hot_has_one_per_pixel(rng):
    labels = rng.integers(0, 4, size=(10, 7))
    onehot = simple_seg(labels).one_hot()
    assert onehot.shape == (4, 10, 7)
    assert np.array_equal(onehot.sum(axis=0), np.ones((10, 7), np.float32))
    assert np.array_equal(onehot.argmax(axis=0), labels)


def test_segmentation_map_validates_labels():
    with pytest.raises(ValidationError):
        simple_seg(np.full((4, 4), 9))
    with pytest.raises(ValidationError):
        SegmentationMap(np.zeros((4, 4), int), num_classes=4, foreground_set=(7,))


# --- classify_mode -----------------------------------------------------------


def _record_from_mask(mask, class_id=2, instance_id=1):
    seg = simple_seg(np.where(mask == 1, class_id, 0))
    return instance_records(seg)[0]


def test_classify_fully_masked_generates():
    inst = np.zeros((10, 10), np.uint8)
    inst[2:5, 2:5] = 1
    record = _record_from_mask(inst)
    assert classify_mode(record, inst.copy()) is SynthesisMode.GENERATE


def test_classify_fully_visible_inpaints():
    inst = np.zeros((10, 10), np.uint8)
    inst[2:5, 2:5] = 1
    assert classify_mode(_record_from_mask(inst), np.zeros_like(inst)) is SynthesisMode.INPAINT


def test_classify_counts_pixels():
    # 100-pixel instance, 4 visible: 4/100 < 0.05 -> GENERATE
    inst = np.zeros((20, 20), np.uint8)
    inst[0:10, 0:10] = 1
    mask = inst.copy()
    mask[0, 0:4] = 0
    record = _record_from_mask(inst)
    assert classify_mode(record, mask, tau_vis=0.05) is SynthesisMode.GENERATE
    mask[0, 0:5] = 0  # 5 visible -> 0.05, not < tau
    assert classify_mode(record, mask, tau_vis=0.05) is SynthesisMode.INPAINT


def test_classify_monotone_in_tau(rng):
    inst = np.zeros((16, 16), np.uint8)
    inst[3:11, 4:12] = 1
    record = _record_from_mask(inst)
    for _ in range(20):
        mask = (rng.random((16, 16)) < rng.random()).astype(np.uint8)
        taus = np.sort(rng.random(5))
        modes = [classify_mode(record, mask, t) for t in taus]
        # Raising tau may flip INPAINT->GENERATE but never the reverse.
        seen_generate = False
        for m in modes:
            if seen_generate:
                assert m is SynthesisMode.GENERATE
            seen_generate = seen_generate or (m is SynthesisMode.GENERATE)


def test_classify_empty_mask_raises():
    inst = np.zeros((8, 8), np.uint8)
    inst[2, 2] = 1
    record = _record_from_mask(inst)
    object.__setattr__(record, "mask", np.zeros((8, 8), np.uint8))
    with pytest.raises(ValidationError):
        classify_mode(record, np.zeros((8, 8), np.uint8))


# --- crop geometry -----------------------------------------------------------


def test_crop_window_hand_math():
    # 7 x 13 bbox on a 64 x 64 image: square side = ceil(13 * 1.1) = 15.
    inst = np.zeros((64, 64), np.uint8)
    inst[20:27, 30:43] = 1
    record = _record_from_mask(inst)
    assert record.bbox == (20, 30, 7, 13)
    top, left, side = crop_window(record, (64, 64))
    assert side == 15
    # Window centered on the bbox center, clamped into bounds.
    assert top == int(np.clip(round(20 + 3.5 - 7.5), 0, 64 - 15))
    assert left == int(np.clip(round(30 + 6.5 - 7.5), 0, 64 - 15))
    assert 0 <= top <= 64 - side and 0 <= left <= 64 - side


def test_crop_native_size_is_exact_subimage(rng):
    img = rng.random((64, 64, 3)).astype(np.float32)
    inst = np.zeros((64, 64), np.uint8)
    inst[10:20, 14:24] = 1
    record = _record_from_mask(inst)
    top, left, side = crop_window(record, (64, 64))
    crop = crop_object(img, record, out_size=side)
    expected = (img * inst[..., None])[top : top + side, left : left + side]
    assert np.array_equal(crop.image, expected)
    assert np.array_equal(crop.mask, inst[top : top + side, left : left + side])


def test_crop_paste_round_trip_bitwise(rng):
    img = rng.random((48, 48, 3)).astype(np.float32)
    inst = np.zeros((48, 48), np.uint8)
    inst[5:17, 8:19] = 1
    record = _record_from_mask(inst)
    _, _, side = crop_window(record, (48, 48))
    crop = crop_object(img, record, out_size=side)
    canvas = np.zeros_like(img)
    paste_object(canvas, crop.image, record, crop.placement)
    sel = inst == 1
    assert np.array_equal(canvas[sel], img[sel])


def test_crop_degenerate_bbox_raises(rng):
    inst = np.zeros((16, 16), np.uint8)
    inst[3, 4] = 1
    record = _record_from_mask(inst)
    object.__setattr__(record, "bbox", (3, 4, 0, 0))
    with pytest.raises(ValidationError):
        crop_object(rng.random((16, 16, 3)).astype(np.float32), record, 8)


def test_crop_rejects_bad_out_size(rng):
    inst = np.zeros((16, 16), np.uint8)
    inst[3:6, 4:8] = 1
    with pytest.raises(ValidationError):
        crop_object(rng.random((16, 16, 3)).astype(np.float32), _record_from_mask(inst), 0)


# --- disassemble -------------------------------------------------------------


def test_disassemble_background_only():
    labels = np.zeros((16, 16), np.int64)  # all sky
    seg = simple_seg(labels)
    mask = np.zeros((16, 16), np.uint8)
    mask[4:10, 4:10] = 1
    dec = disassemble(erase_input(np.ones((16, 16, 3), np.float32), mask), seg, mask)
    assert len(dec.objects) == 0
    assert np.array_equal(dec.background_mask, mask)


def test_disassemble_fully_masked_instance_generates():
    labels = np.zeros((16, 16), np.int64)
    labels[4:8, 4:8] = 2
    seg = simple_seg(labels)
    mask = np.zeros((16, 16), np.uint8)
    mask[2:10, 2:10] = 1
    img = np.ones((16, 16, 3), np.float32)
    dec = disassemble(erase_input(img, mask), seg, mask, crop_size=8)
    assert len(dec.objects) == 1
    record = dec.objects[0].record
    assert record.mode is SynthesisMode.GENERATE
    assert record.visible_fraction == 0.0


def test_disassemble_matches_hand_enumeration():
    # Two instances of the same class with overlapping bboxes, ids from an
    # instance map; oracle masks enumerated pixel by pixel.
    labels = np.zeros((16, 16), np.int64)
    inst_map = np.zeros((16, 16), np.int32)
    labels[2:9, 2:9] = 2
    inst_map[2:9, 2:9] = 5
    labels[6:13, 6:13] = 2
    inst_map[6:13, 6:13] = 9  # overwrites the overlap region
    seg = simple_seg(labels)
    mask = np.ones((16, 16), np.uint8)
    dec = disassemble(np.zeros((16, 16, 3), np.float32), seg, mask, inst_map, crop_size=8)
    got = {o.record.instance_id: o.record.mask for o in dec.objects}
    expected_5 = np.zeros((16, 16), np.uint8)
    expected_9 = np.zeros((16, 16), np.uint8)
    for y in range(16):
        for x in range(16):
            if inst_map[y, x] == 5 and labels[y, x] == 2:
                expected_5[y, x] = 1
            if inst_map[y, x] == 9 and labels[y, x] == 2:
                expected_9[y, x] = 1
    assert set(got) == {5, 9}
    assert np.array_equal(got[5], expected_5)
    assert np.array_equal(got[9], expected_9)


def test_disassemble_rejects_id_spanning_classes():
    labels = np.zeros((8, 8), np.int64)
    labels[0:2, 0:2] = 2
    labels[4:6, 4:6] = 3
    inst_map = np.zeros((8, 8), np.int32)
    inst_map[0:2, 0:2] = 1
    inst_map[4:6, 4:6] = 1  # same id on two foreground classes
    with pytest.raises(ValidationError):
        disassemble(
            np.zeros((8, 8, 3), np.float32), simple_seg(labels), np.ones((8, 8), np.uint8), inst_map
        )


def test_partition_invariant_random_scenes(rng):
    for _ in range(50):
        labels = rng.integers(0, 4, size=(24, 24))
        seg = simple_seg(labels)
        mask = (rng.random((24, 24)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        dec = disassemble(np.zeros((24, 24, 3), np.float32), seg, mask, crop_size=8)
        union = np.zeros((24, 24), np.uint8)
        for obj in dec.objects:
            union |= obj.record.mask
        assert not (dec.background_mask & union).any()
        covered = (dec.background_mask | union) & mask
        assert np.array_equal(covered, mask)
        assert not (dec.background_mask & (1 - mask)).any()


def test_disassemble_zeroes_objects_in_background_input(rng):
    labels = np.zeros((16, 16), np.int64)
    labels[4:9, 4:9] = 2
    seg = simple_seg(labels)
    mask = np.zeros((16, 16), np.uint8)
    mask[6:12, 6:12] = 1
    img = rng.random((16, 16, 3)).astype(np.float32)
    dec = disassemble(erase_input(img, mask), seg, mask, crop_size=8)
    inst = dec.objects[0].record.mask
    assert np.array_equal(dec.background_input[inst == 1], np.zeros((inst.sum(), 3), np.float32))


# --- compose -----------------------------------------------------------------


def test_compose_no_objects_is_identity(rng):
    bg = rng.random((20, 20, 3)).astype(np.float32)
    assert np.array_equal(compose(bg, []), bg)


def test_compose_ground_truth_crop_restores_pixels(rng):
    img = rng.random((32, 32, 3)).astype(np.float32)
    inst = np.zeros((32, 32), np.uint8)
    inst[8:16, 10:21] = 1
    record = _record_from_mask(inst)
    _, _, side = crop_window(record, (32, 32))
    crop = crop_object(img, record, out_size=side)
    out = compose(np.zeros_like(img), [(crop.image, record, crop.placement)])
    sel = inst == 1
    assert np.array_equal(out[sel], img[sel])
    assert np.array_equal(out[~sel], np.zeros_like(img)[~sel])


def test_compose_overlap_order_matches_oracle(rng):
    # Larger instance pasted first; the smaller one wins the overlap.
    big = np.zeros((32, 32), np.uint8)
    big[4:20, 4:20] = 1
    small = np.zeros((32, 32), np.uint8)
    small[12:20, 12:20] = 1
    big[small == 1] = 0  # labels are exclusive, bboxes overlap after crop
    rec_big = _record_from_mask(big, class_id=2, instance_id=1)
    rec_small = _record_from_mask(small, class_id=3, instance_id=2)
    crop_big = np.full((crop_window(rec_big, (32, 32))[2],) * 2 + (3,), 0.25, np.float32)
    crop_small = np.full((crop_window(rec_small, (32, 32))[2],) * 2 + (3,), 0.75, np.float32)
    out = compose(
        np.zeros((32, 32, 3), np.float32),
        [
            (crop_small, rec_small, _placement(rec_small, (32, 32))),
            (crop_big, rec_big, _placement(rec_big, (32, 32))),
        ],
    )
    # Oracle: paint in descending area order pixelwise.
    oracle = np.zeros((32, 32, 3), np.float32)
    order = sorted(
        [(rec_big, 0.25), (rec_small, 0.75)], key=lambda t: -int(t[0].mask.sum())
    )
    for rec, value in order:
        oracle[rec.mask == 1] = value
    assert np.array_equal(out, oracle)


def _placement(record, hw):
    from siedob.scene import Placement

    top, left, side = crop_window(record, hw)
    return Placement(top=top, left=left, side=side, out_size=side)
