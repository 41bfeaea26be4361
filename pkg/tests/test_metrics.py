import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vinseg.metrics import PanopticCounts, confusion_matrix, iou_metrics, panoptic_counts, panoptic_quality, report_from_counts
from vinseg.panoptic import PanopticCloud
from vinseg.types import IGNORE, STUFF, THING, ClassTaxonomy

from cases import small_panoptic_scene
from oracles import iou_oracle, panoptic_oracle

TAX = ClassTaxonomy((("a", THING), ("road", STUFF)))


def test_confusion_examples():
    assert np.array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3), np.eye(3, dtype=int))
    assert not confusion_matrix([0, 1], [IGNORE, IGNORE], 3).any()
    cm = confusion_matrix([0, 1, 1], [0, 0, 1], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]
    assert cm.sum() == 3
    with pytest.raises(ValueError):
        confusion_matrix([3], [0], 3)
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 3)


def test_iou_examples():
    r = iou_metrics(confusion_matrix([0, 1, 2], [0, 1, 2], 4))
    assert r.miou == 1.0 and r.fwiou == 1.0 and math.isnan(r.iou[3])
    r = iou_metrics(np.array([[1, 0], [1, 0]]))  # class 0: TP 1, FP 1, FN 0
    assert r.iou[0] == 0.5
    empty = iou_metrics(np.zeros((3, 3), int))
    assert math.isnan(empty.miou) and math.isnan(empty.fwiou)


@given(st.integers(0, 2**32 - 1))
def test_iou_set_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 60))
    gt = rng.integers(0, 5, n)
    gt[rng.uniform(size=n) < 0.1] = IGNORE
    pred = rng.integers(0, 5, n)
    r = iou_metrics(confusion_matrix(pred, gt, 5))
    want = iou_oracle(pred, gt, 5, IGNORE)
    for c in range(5):
        if want[c] is None:
            assert math.isnan(r.iou[c])
        else:
            assert r.iou[c] == pytest.approx(float(want[c]), abs=1e-15)
    valid = [w for w in want if w is not None]
    if valid:
        assert r.miou == pytest.approx(float(sum(valid) / len(valid)), abs=1e-12)
        vals = [float(w) for w in valid]
        assert min(vals) - 1e-12 <= r.fwiou <= max(vals) + 1e-12


def test_pq_single_instance_iou_06():
    gt_l = np.array([0] * 5 + [1] * 5)
    gt_i = np.array([1] * 5 + [0] * 5)
    # pred covers 3 of the 5 gt points plus nothing else -> IoU 3/5 = 0.6
    pr_l = np.array([0, 0, 0, 1, 1] + [1] * 5)
    pr_i = np.array([7, 7, 7, 0, 0] + [0] * 5)
    rep = panoptic_quality(PanopticCloud(pr_l, pr_i), PanopticCloud(gt_l, gt_i), TAX)
    c = rep.per_class[0]
    assert (c.tp, c.fp, c.fn) == (1, 0, 0)
    assert c.pq == pytest.approx(0.6) and c.sq == pytest.approx(0.6) and c.rq == 1.0


def test_pq_below_threshold():
    gt_l = np.array([0] * 5 + [1] * 5)
    gt_i = np.array([1] * 5 + [0] * 5)
    pr_l = np.array([0, 0, 1, 1, 1, 1, 1, 1, 1, 1])
    pr_i = np.array([7, 7, 0, 0, 0, 0, 0, 0, 0, 0])  # IoU 2/5 = 0.4
    c = panoptic_quality(PanopticCloud(pr_l, pr_i), PanopticCloud(gt_l, gt_i), TAX).per_class[0]
    assert (c.tp, c.fp, c.fn) == (0, 1, 1) and c.pq == 0.0


def test_perfect_prediction():
    pl, pi, gl, gi, tax = small_panoptic_scene(0)
    rep = panoptic_quality(PanopticCloud(gl, gi), PanopticCloud(gl, gi), tax)
    agg = rep.aggregates()
    for k in ("pq", "sq", "rq", "miou", "fwiou", "pq_dagger", "pq_th", "pq_st"):
        assert agg[k] == 1.0


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_pq_exhaustive_oracle(seed):
    pl, pi, gl, gi, tax = small_panoptic_scene(seed)
    rep = panoptic_quality(PanopticCloud(pl, pi), PanopticCloud(gl, gi), tax)
    want = panoptic_oracle(pl, pi, gl, gi, [tax.is_thing(c) for c in range(4)], IGNORE)
    for c, (tp, fp, fn, iou_sum) in enumerate(want):
        got = rep.per_class[c]
        assert (got.tp, got.fp, got.fn) == (tp, fp, fn)
        assert got.iou_sum == pytest.approx(float(iou_sum), abs=1e-12)
        if tp:
            assert abs(got.pq - got.sq * got.rq) <= 1e-12


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_instance_id_permutation_invariance(seed):
    pl, pi, gl, gi, tax = small_panoptic_scene(seed)
    rng = np.random.default_rng(seed)
    perm = np.concatenate([[0], rng.permutation(np.arange(1, 100))])
    a = panoptic_quality(PanopticCloud(pl, pi), PanopticCloud(gl, gi), tax).aggregates()
    b = panoptic_quality(PanopticCloud(pl, perm[pi]), PanopticCloud(gl, perm[gi]), tax).aggregates()
    assert a == pytest.approx(b, nan_ok=True)


def test_counts_merge_is_exact():
    parts = [small_panoptic_scene(s) for s in range(5)]
    tax = parts[0][4]
    counts = [panoptic_counts(PanopticCloud(pl, pi), PanopticCloud(gl, gi), tax) for pl, pi, gl, gi, _ in parts]
    fwd, rev = PanopticCounts(4), PanopticCounts(4)
    for c in counts:
        fwd = fwd.merge(c)
    for c in reversed(counts):
        rev = rev.merge(c)
    assert np.array_equal(fwd.tp, sum(c.tp for c in counts))
    assert np.array_equal(fwd.confusion, sum(c.confusion for c in counts))
    assert report_from_counts(fwd, tax).aggregates() == report_from_counts(rev, tax).aggregates()
    rep = report_from_counts(fwd, tax)
    for c in range(4):
        want = sum(Fraction(v) for k in counts for v in k.matched_ious[c])
        assert rep.per_class[c].iou_sum == pytest.approx(float(want), abs=1e-12)


def test_absent_classes_excluded():
    tax = ClassTaxonomy((("a", THING), ("b", THING), ("road", STUFF)))
    lab = np.array([0, 0, 2])
    inst = np.array([1, 1, 0])
    rep = panoptic_quality(PanopticCloud(lab, inst), PanopticCloud(lab, inst), tax)
    assert not rep.per_class[1].present
    assert rep.aggregates()["pq"] == 1.0
    assert math.isnan(rep.rows()[1]["pq"])
