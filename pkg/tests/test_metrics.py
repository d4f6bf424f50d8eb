import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import iou_counts, mean_defined
from stseg.datagen import SceneSpec, ShapeSpec, generate_sequence
from stseg.errors import ShapeError
from stseg.flow import FlowField
from stseg.metrics import (
    aggregate_iou,
    evaluate_stream,
    iou_class,
    iou_per_class,
    percent_difference,
    read_report_csv,
    temporal_consistency,
    warp_mask,
)
from stseg.validate import PN_PER_CLASS_IOU, brute_force_stream, compare_to_brute_force, random_stream

masks = arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 3))


def test_iou_identical_and_disjoint():
    m = np.array([[1, 1], [0, 2]])
    assert iou_class(m, m, 1) == 1.0
    a = np.array([[1, 1, 0, 0]])
    b = np.array([[0, 0, 1, 1]])
    assert iou_class(a, b, 1) == 0.0


def test_iou_pixel_count_example():
    gt = np.zeros((4, 4), int)
    gt[0, :4] = 1
    pred = np.zeros((4, 4), int)
    pred[0, :2] = 1
    pred[3, 3] = 1
    assert iou_class(pred, gt, 1) == pytest.approx(2 / 5, abs=1e-15)


def test_iou_undefined_when_absent():
    assert math.isnan(iou_class(np.zeros((2, 2)), np.zeros((2, 2)), 1))


def test_iou_dim_mismatch():
    with pytest.raises(ShapeError):
        iou_class(np.zeros((2, 2)), np.zeros((2, 3)), 0)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_iou_properties(data):
    a = data.draw(masks)
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 3)))
    for c in range(4):
        x, y = iou_class(a, b, c), iou_class(b, a, c)
        assert (math.isnan(x) and math.isnan(y)) or x == y
        inter, union = iou_counts(a, b, c)
        assert (union == 0 and math.isnan(x)) or x == inter / union
        if not math.isnan(x):
            assert 0.0 <= x <= 1.0
            assert (x == 1.0) == bool(np.array_equal(a == c, b == c))
    np.testing.assert_array_equal(iou_per_class(a, b, 4), [iou_class(a, b, c) for c in range(4)])


def test_iou_monotone_in_disjoint_false_positives():
    gt = np.zeros((6, 6), int)
    gt[:2, :2] = 1
    pred = gt.copy()
    prev = iou_class(pred, gt, 1)
    for y, x in [(5, 5), (5, 4), (4, 5), (3, 3)]:
        pred[y, x] = 1
        cur = iou_class(pred, gt, 1)
        assert cur <= prev
        prev = cur


@pytest.mark.parametrize("name", list(PN_PER_CLASS_IOU))
def test_aggregate_reproduces_published_means(name):
    values, reported = PN_PER_CLASS_IOU[name]
    _, _, miou, undefined = aggregate_iou(np.array([values]))
    assert abs(miou - reported) < 1e-3
    assert undefined == []


def test_aggregate_single_value_and_undefined_class():
    per, counts, miou, undef = aggregate_iou(np.array([[0.42]]))
    assert miou == 0.42 and counts.tolist() == [1]
    per, counts, miou, undef = aggregate_iou(np.array([[0.5, np.nan], [1.0, np.nan]]))
    assert miou == 0.75 and undef == [1] and counts.tolist() == [2, 0]


def test_aggregate_is_mean_over_frames_then_classes():
    table = np.array([[1.0, 0.0], [0.5, np.nan], [0.0, 1.0]])
    per, _, miou, _ = aggregate_iou(table)
    np.testing.assert_allclose(per, [0.5, 0.5])
    assert miou == 0.5


# (before, after, reported difference) for every summary-table pair
PUBLISHED_DIFFERENCES = [
    (0.5680, 0.5810, 1.30), (0.4570, 0.5199, 6.29), (0.6110, 0.6537, 4.27), (0.8368, 0.8624, 2.56),
    (0.6187, 0.6291, 1.04), (0.4890, 0.5613, 7.23), (0.6842, 0.6938, 0.960), (0.8406, 0.8726, 3.20),
]


@pytest.mark.parametrize("a,b,reported", PUBLISHED_DIFFERENCES)
def test_percent_difference_reproduces_published_rows(a, b, reported):
    # the published rows are absolute differences in percentage points
    assert percent_difference(a, b) == pytest.approx(reported, abs=1e-9)


def test_percent_difference_nan_propagates():
    assert math.isnan(percent_difference(float("nan"), 0.5))


# -- warping ------------------------------------------------------------------


def test_warp_zero_flow_identity(rng):
    prev = rng.integers(0, 4, size=(5, 6))
    warped, valid = warp_mask(prev, FlowField.zeros(5, 6))
    np.testing.assert_array_equal(warped, prev)
    assert valid.all()


def test_warp_uniform_flow_moves_label():
    prev = np.zeros((5, 5), int)
    prev[2, 1] = 3
    flow = FlowField(np.tile(np.array([-1.0, 0.0], np.float32), (5, 5, 1)), np.ones((5, 5), bool))
    warped, valid = warp_mask(prev, flow)
    assert warped[2, 2] == 3 and warped.sum() == 3
    assert not valid[:, 0].any() and valid[:, 1:].all()


def test_warp_outside_image_invalid():
    flow = FlowField(np.full((3, 3, 2), 10.0, np.float32), np.ones((3, 3), bool))
    _, valid = warp_mask(np.ones((3, 3), int), flow)
    assert not valid.any()


def test_warp_flagged_invalid_pixels_excluded():
    v = np.ones((3, 3), bool)
    v[1, 1] = False
    _, valid = warp_mask(np.ones((3, 3), int), FlowField(np.zeros((3, 3, 2), np.float32), v))
    assert valid.sum() == 8 and not valid[1, 1]


def test_warp_dim_mismatch():
    with pytest.raises(ShapeError):
        warp_mask(np.zeros((3, 3)), FlowField.zeros(3, 4))


# -- temporal consistency -----------------------------------------------------


def test_tc_identical_zero_flow_is_one(rng):
    m = rng.integers(0, 3, size=(6, 6))
    tc = temporal_consistency(m, m, FlowField.zeros(6, 6), 3)
    present = np.unique(m)
    assert np.all(tc[present] == 1.0)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_tc_with_zero_flow_is_plain_iou(data):
    a = data.draw(masks)
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 3)))
    tc = temporal_consistency(a, b, FlowField.zeros(*a.shape), 4)
    np.testing.assert_array_equal(tc, iou_per_class(a, b, 4))


def moving_disc(dx):
    spec = SceneSpec(width=40, height=24, num_frames=2, num_classes=2,
                     shapes=[ShapeSpec(1, "disc", (14.0, 12.0), (dx, 0.0), (5.0, 5.0))])
    return generate_sequence(spec)


def test_tc_perfect_tracking_is_one():
    seq = moving_disc(1.0)
    tc = temporal_consistency(seq.masks[1], seq.masks[0], seq.backward_flows[0], 2)
    np.testing.assert_array_equal(tc, [1.0, 1.0])


def test_tc_frozen_prediction_equals_offset_disc_iou():
    seq = moving_disc(3.0)
    frozen = seq.masks[0]
    tc = temporal_consistency(frozen, frozen, seq.backward_flows[0], 2)
    warped, valid = warp_mask(frozen, seq.backward_flows[0])
    inter, union = iou_counts(frozen[valid], warped[valid], 1)
    assert tc[1] == inter / union
    assert 0 < tc[1] < 1


# -- streams and reports ------------------------------------------------------


def test_stream_perfect_predictions():
    seq = moving_disc(1.0)
    rep = evaluate_stream(list(seq.masks), list(seq.masks), seq.backward_flows, 2)
    assert rep.mean_iou == 1.0 and rep.mean_tc == 1.0


def test_stream_all_background_predictions():
    seq = moving_disc(1.0)
    preds = [np.zeros_like(m) for m in seq.masks]
    rep = evaluate_stream(preds, list(seq.masks), seq.backward_flows, 2)
    assert rep.iou[1] == 0.0


def test_stream_length_mismatch():
    with pytest.raises(ShapeError):
        evaluate_stream([np.zeros((2, 2))], [np.zeros((2, 2))] * 2, None, 2)
    with pytest.raises(ShapeError):
        evaluate_stream([np.zeros((2, 2))] * 3, [np.zeros((2, 2))] * 3, [FlowField.zeros(2, 2)], 2)


@pytest.mark.parametrize("seed", range(10))
def test_stream_matches_brute_force(seed):
    stream = random_stream(np.random.default_rng(seed))
    assert compare_to_brute_force(*stream) < 1e-12


def test_brute_force_oracle_agrees_with_hand_case():
    preds = [np.array([[1, 0], [0, 0]], np.uint8), np.array([[1, 1], [0, 0]], np.uint8)]
    gts = [np.array([[1, 1], [0, 0]], np.uint8)] * 2
    flows = [FlowField.zeros(2, 2)]
    (iou, _, miou), (tc, _, mtc) = brute_force_stream(preds, gts, flows, 2)
    # frame 0: class1 1/2, class0 2/3; frame 1: both 1
    assert iou == [pytest.approx((2 / 3 + 1) / 2), pytest.approx((0.5 + 1) / 2)]
    assert tc == [pytest.approx(2 / 3), pytest.approx(1 / 2)]
    assert mean_defined([2 / 3, 0.5]) == pytest.approx(mtc)


def test_report_values_in_unit_interval_and_csv(tmp_path):
    stream = random_stream(np.random.default_rng(3))
    rep = evaluate_stream(*stream[:3], stream[3])
    for _, iou, _, tc, _ in rep.rows():
        assert 0 <= iou <= 1
        assert math.isnan(tc) or 0 <= tc <= 1
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "class,iou,iou_count,tc,tc_count"
    assert lines[-1].startswith("__mean__,")
    parsed = read_report_csv(path)
    assert parsed["__mean__"]["iou"] == pytest.approx(rep.mean_iou, abs=5e-7)
    assert all(len(v.split(".")[1]) == 6 for line in lines[1:] for v in line.split(",")[1::2] if v != "nan")


def test_report_omits_classes_never_defined():
    m = [np.zeros((3, 3), np.uint8)] * 2
    rep = evaluate_stream(m, m, [FlowField.zeros(3, 3)], 4, ["bg", "a", "b", "c"])
    assert [r[0] for r in rep.rows()] == ["bg", "__mean__"]
    assert rep.warnings == 3
