import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from advtrack import evaluation as E
from advtrack.trackers.base import BBox

from conftest import ScriptedTracker, box_mask, scripted_sequence

boxes = st.builds(BBox, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 60), st.floats(0.5, 60))


# -- overlaps -----------------------------------------------------------------


def test_bbox_iou_examples():
    assert E.bbox_iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
    assert E.bbox_iou(BBox(0, 0, 10, 10), BBox(20, 20, 5, 5)) == 0.0
    assert E.bbox_iou(BBox(0, 0, 10, 10), BBox(5, 0, 10, 10)) == pytest.approx(50 / 150)
    assert E.bbox_iou(BBox(0, 0, 10, 10), BBox(10, 0, 10, 10)) == 0.0


@given(boxes, boxes)
def test_bbox_iou_symmetric_and_bounded(a, b):
    v = E.bbox_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == E.bbox_iou(b, a)


@given(boxes)
def test_bbox_iou_self_is_one(a):
    assert E.bbox_iou(a, a) == pytest.approx(1.0, rel=1e-12)


def test_boxes_iou_vectorised_matches_scalar():
    r = np.random.default_rng(0)
    rows = np.column_stack([r.uniform(0, 40, (30, 2)), r.uniform(1, 20, (30, 2))])
    ref = BBox(10, 12, 15, 9)
    expected = [E.bbox_iou(BBox(*row), ref) for row in rows]
    np.testing.assert_allclose(E.boxes_iou(rows, ref), expected, rtol=1e-13, atol=1e-15)


def test_mask_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[:, :2] = True
    assert E.mask_iou(a, b) == pytest.approx(4 / 12)
    assert E.mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(E.DimensionError):
        E.mask_iou(a, np.zeros((4, 5)))


def test_center_error():
    assert E.center_error(BBox(0, 0, 10, 10), BBox(3, 4, 10, 10)) == 5.0


# -- OPE curves ---------------------------------------------------------------


def test_success_curve_uses_strict_threshold():
    curve = E.success_curve([1.0])
    assert len(curve) == 21
    assert curve[:-1].tolist() == [1.0] * 20 and curve[-1] == 0.0
    assert E.auc(curve) == pytest.approx(20 / 21)
    assert E.success_curve([0.5], [0.5])[0] == 0.0


def test_success_curve_mixed():
    curve = E.success_curve([0.0, 0.3, 0.8, 1.0])
    # thresholds 0.00..0.25 catch three overlaps, 0.30..0.75 two, 0.80..0.95 one, 1.00 none
    expected = [0.75] * 6 + [0.5] * 10 + [0.25] * 4 + [0.0]
    np.testing.assert_allclose(curve, expected)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_success_curve_non_increasing(ov):
    assert np.all(np.diff(E.success_curve(ov)) <= 0)


def test_precision_examples():
    assert E.precision_at([0.0, 20.0, 20.5, 100.0]) == 0.5
    assert E.precision_curve([3.0], [2.0, 3.0, 4.0]).tolist() == [0.0, 1.0, 1.0]


def test_normalized_precision():
    gts = [BBox(0, 0, 10, 20)] * 2
    preds = [BBox(1, 2, 10, 20), BBox(5, 0, 10, 20)]
    err = E.normalized_errors(preds, gts)
    np.testing.assert_allclose(err, [[0.1, 0.1], [0.5, 0.0]])
    curve = E.norm_precision_curve(err, [0.1, 0.15, 0.5])
    assert curve.tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(E.DimensionError):
        E.normalized_errors(preds[:1], [BBox(0, 0, 0, 5)])


def test_ao_sr():
    assert E.ao_sr([0.2, 0.6, 0.8, 1.0]) == pytest.approx((0.65, 0.75, 0.5))


def test_empty_inputs_raise():
    for fn in (E.success_curve, E.auc, E.precision_curve, E.ao_sr, E.norm_precision):
        with pytest.raises(E.EmptyInputError):
            fn([])


# -- anchor protocol ----------------------------------------------------------


def test_anchor_metrics_perfect():
    runs = [E.AnchorRun(0, [1.0] * 99, 99), E.AnchorRun(50, [1.0] * 49, 49)]
    # runs that never fail are averaged over the frames they actually cover
    assert E.anchor_metrics(runs, 100) == (1.0, 1.0, 1.0)
    assert E.anchor_metrics(runs, 49) == (1.0, 1.0, 1.0)


def test_anchor_metrics_failure_hand_case():
    run = E.AnchorRun(0, [0.8, 0.6, 0.05], 10, failed=True, failure_frame=2)
    eao, acc, rob = E.anchor_metrics([run], 5)
    assert eao == pytest.approx(1.4 / 5)
    assert acc == pytest.approx(0.7)
    assert rob == pytest.approx(0.2)


def test_anchor_metrics_all_failed_immediately():
    run = E.AnchorRun(0, [0.0], 10, failed=True, failure_frame=0)
    assert E.anchor_metrics([run], 10) == (0.0, 0.0, 0.0)


def test_anchor_metrics_errors():
    with pytest.raises(E.EmptyInputError):
        E.anchor_metrics([], 10)
    with pytest.raises(E.EmptyInputError):
        E.anchor_metrics([E.AnchorRun(0, [], 0)], 10)
    with pytest.raises(ValueError):
        E.anchor_metrics([E.AnchorRun(0, [1.0], 1)], 0)


def test_anchor_evaluate_reinitialises_at_each_anchor():
    seq = scripted_sequence(120)
    assert seq.anchors == [0, 50, 100]

    def script(t, gt):
        return BBox(gt.x + 100, gt.y, gt.w, gt.h) if t in (10, 60) else gt

    tr = ScriptedTracker(seq.gt_boxes, script)
    runs = E.anchor_evaluate(lambda k: E.CleanRunner(tr), seq)
    assert [r.anchor_frame for r in runs] == [0, 50, 100]
    assert [r.failure_frame for r in runs] == [9, 9, None]
    assert [len(r.run_overlaps) for r in runs] == [10, 10, 19]


def test_anchor_evaluate_rejects_out_of_range_anchor():
    seq = scripted_sequence(10)
    with pytest.raises(E.AnchorRangeError):
        E.anchor_evaluate(lambda k: E.CleanRunner(ScriptedTracker(seq.gt_boxes)), seq, anchors=[9])


@given(st.lists(st.floats(0.1, 1.0), min_size=1, max_size=30), st.integers(1, 60))
def test_anchor_metrics_bounded(ov, horizon):
    eao, acc, rob = E.anchor_metrics([E.AnchorRun(0, ov, len(ov))], horizon)
    assert 0 <= eao <= 1 and 0 <= acc <= 1 and rob == 1.0


# -- OPE driver ---------------------------------------------------------------


def test_run_ope_perfect_tracker(perfect):
    seq, tr = perfect
    res = E.run_ope(E.CleanRunner(tr), seq)
    assert res.overlaps == [1.0] * len(seq)
    b = E.ope_bundle([res])
    assert b.auc == pytest.approx(20 / 21) and b.precision_at_20 == 1.0 and b.ao == 1.0


def test_run_ope_mask_mode_uses_masks():
    seq = scripted_sequence(5)
    tr = ScriptedTracker(seq.gt_boxes, mask_fn=lambda t, gt, shape: box_mask(gt, shape))
    res = E.run_ope(E.CleanRunner(tr), seq, mode="mask")
    assert res.overlaps == [1.0] * 5


def test_run_ope_stops_cooperatively(perfect):
    seq, tr = perfect
    with pytest.raises(TimeoutError):
        E.run_ope(E.CleanRunner(tr), seq, should_stop=lambda: True)


# -- drop percentage ----------------------------------------------------------


def test_drop_percentage_examples():
    assert E.drop_percentage(0.299, 0.231) == pytest.approx(22.742474916, rel=1e-9)
    assert E.drop_percentage(0.472, 0.477) == pytest.approx(-1.059322034, rel=1e-9)
    assert E.drop_percentage(1.0, 1.0) == 0.0
    with pytest.raises(E.UndefinedDropError):
        E.drop_percentage(0.0, 0.1)


@given(st.floats(1e-3, 1e3), st.floats(0, 1e3))
def test_drop_percentage_sign_matches_direction(o, a):
    d = E.drop_percentage(o, a)
    assert (d > 0) == (a < o) and (d < 0) == (a > o)
