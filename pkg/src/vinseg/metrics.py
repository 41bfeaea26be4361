"""Semantic (IoU family) and panoptic (PQ / SQ / RQ) evaluation.

Ground-truth points labelled ``IGNORE`` are dropped before anything is counted.
Undefined quantities (e.g. IoU of a class absent from both sides) are NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

from .panoptic import PanopticCloud
from .types import IGNORE, ClassTaxonomy


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    """``cm[g, p]`` point counts; rows with ``gt == IGNORE`` are skipped."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if len(pred) != len(gt):
        raise ValueError(f"pred has {len(pred)} labels, gt has {len(gt)}")
    keep = gt != IGNORE
    pred, gt = pred[keep], gt[keep]
    for name, arr in (("gt", gt), ("pred", pred)):
        if len(arr) and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} label out of range 0..{n_classes - 1}")
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


@dataclass
class IouResult:
    iou: np.ndarray  # per class, NaN where the union is empty
    miou: float
    fwiou: float


def iou_metrics(cm: np.ndarray) -> IouResult:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1).astype(np.float64)
    union = gt_count + cm.sum(axis=0) - tp
    total = cm.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    if total == 0:
        return IouResult(iou, float("nan"), float("nan"))
    valid = union > 0
    miou = float(iou[valid].mean())
    # one division at the end keeps a perfect prediction at exactly 1
    fwiou = math.fsum(gt_count[valid] * iou[valid]) / float(total)
    return IouResult(iou, miou, fwiou)


def _mean(values) -> float:
    values = [v for v in values if not np.isnan(v)]
    return float(np.mean(values)) if values else float("nan")


@dataclass
class ClassPanoptic:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def pq(self) -> float:
        den = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / den if den > 0 else float("nan")

    @property
    def sq(self) -> float:
        if not self.present:
            return float("nan")
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        den = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / den if den > 0 else float("nan")


@dataclass
class PanopticReport:
    class_names: list[str]
    thing_mask: list[bool]
    per_class: list[ClassPanoptic]
    iou: np.ndarray
    miou: float
    fwiou: float
    confusion: np.ndarray = field(repr=False, default=None)

    def _agg(self, attr, ids):
        return _mean([getattr(self.per_class[c], attr) for c in ids if self.per_class[c].present])

    @property
    def things(self) -> list[int]:
        return [c for c, t in enumerate(self.thing_mask) if t]

    @property
    def stuff(self) -> list[int]:
        return [c for c, t in enumerate(self.thing_mask) if not t]

    def aggregates(self) -> dict:
        all_ids = list(range(len(self.class_names)))
        out = {}
        for attr in ("pq", "sq", "rq"):
            out[attr] = self._agg(attr, all_ids)
            out[attr + "_th"] = self._agg(attr, self.things)
            out[attr + "_st"] = self._agg(attr, self.stuff)
        # PQ-dagger: stuff classes scored by their semantic IoU
        dagger = []
        for c in all_ids:
            if not self.per_class[c].present:
                continue
            dagger.append(self.per_class[c].pq if self.thing_mask[c] else self.iou[c])
        out["pq_dagger"] = _mean(dagger)
        out["miou"] = self.miou
        out["fwiou"] = self.fwiou
        out["miou_th"] = _mean([self.iou[c] for c in self.things])
        out["miou_st"] = _mean([self.iou[c] for c in self.stuff])
        return out

    def rows(self) -> list[dict]:
        out = []
        for c, name in enumerate(self.class_names):
            s = self.per_class[c]
            out.append(
                dict(
                    class_id=c,
                    name=name,
                    kind="thing" if self.thing_mask[c] else "stuff",
                    iou=float(self.iou[c]),
                    pq=s.pq,
                    sq=s.sq,
                    rq=s.rq,
                    tp=s.tp,
                    fp=s.fp,
                    fn=s.fn,
                )
            )
        return out


def _segment_ids(labels, instance, thing_mask):
    """Map points to segment keys; -1 for points outside any segment."""
    is_thing = thing_mask[labels]
    # thing points without an instance belong to no segment
    key = np.where(is_thing, labels * (1 << 32) + instance, labels * (1 << 32))
    key = np.where(is_thing & (instance == 0), -1, key)
    return key


@dataclass
class PanopticCounts:
    """Integer-exact accumulators; merge across scenes, then compute ratios."""

    n_classes: int
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    matched_ious: list = None
    confusion: np.ndarray = None

    def __post_init__(self):
        S = self.n_classes
        if self.tp is None:
            self.tp = np.zeros(S, dtype=np.int64)
            self.fp = np.zeros(S, dtype=np.int64)
            self.fn = np.zeros(S, dtype=np.int64)
            self.matched_ious = [[] for _ in range(S)]
            self.confusion = np.zeros((S, S), dtype=np.int64)

    def merge(self, other: "PanopticCounts") -> "PanopticCounts":
        out = PanopticCounts(self.n_classes)
        out.tp = self.tp + other.tp
        out.fp = self.fp + other.fp
        out.fn = self.fn + other.fn
        out.matched_ious = [a + b for a, b in zip(self.matched_ious, other.matched_ious)]
        out.confusion = self.confusion + other.confusion
        return out


def panoptic_counts(pred: PanopticCloud, gt: PanopticCloud, taxonomy: ClassTaxonomy) -> PanopticCounts:
    if len(pred) != len(gt):
        raise ValueError(f"pred has {len(pred)} points, gt has {len(gt)}")
    S = taxonomy.n_classes
    thing_mask = np.array([taxonomy.is_thing(c) for c in range(S)])
    counts = PanopticCounts(S)
    counts.confusion = confusion_matrix(pred.sem_label, gt.sem_label, S)

    keep = gt.sem_label != IGNORE
    pl, pi = pred.sem_label[keep], pred.instance[keep]
    gl, gi = gt.sem_label[keep], gt.instance[keep]
    pkey = _segment_ids(pl, pi, thing_mask)
    gkey = _segment_ids(gl, gi, thing_mask)

    for c in range(S):
        pc = (pl == c) & (pkey >= 0)
        gc = (gl == c) & (gkey >= 0)
        p_ids, p_inv = np.unique(pkey[pc], return_inverse=True)
        g_ids, g_inv = np.unique(gkey[gc], return_inverse=True)
        p_area = np.bincount(p_inv, minlength=len(p_ids))
        g_area = np.bincount(g_inv, minlength=len(g_ids))
        both = pc & gc
        # pair (gt segment, pred segment) intersections
        gp = np.searchsorted(g_ids, gkey[both]) * max(len(p_ids), 1) + np.searchsorted(p_ids, pkey[both])
        inter = np.bincount(gp, minlength=len(g_ids) * len(p_ids)).reshape(len(g_ids), len(p_ids))
        union = g_area[:, None] + p_area[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, inter / union, 0.0)
        match = iou > 0.5
        # IoU > 0.5 makes matches unique
        assert np.all(match.sum(axis=0) <= 1) and np.all(match.sum(axis=1) <= 1)
        n_tp = int(match.sum())
        counts.tp[c] = n_tp
        counts.fp[c] = len(p_ids) - n_tp
        counts.fn[c] = len(g_ids) - n_tp
        counts.matched_ious[c] = sorted(float(v) for v in iou[match])
    return counts


def report_from_counts(counts: PanopticCounts, taxonomy: ClassTaxonomy) -> PanopticReport:
    S = taxonomy.n_classes
    per_class = []
    for c in range(S):
        ious = sorted(counts.matched_ious[c])
        per_class.append(ClassPanoptic(int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c]), float(np.sum(ious))))
    res = iou_metrics(counts.confusion)
    return PanopticReport(
        class_names=taxonomy.names,
        thing_mask=[taxonomy.is_thing(c) for c in range(S)],
        per_class=per_class,
        iou=res.iou,
        miou=res.miou,
        fwiou=res.fwiou,
        confusion=counts.confusion,
    )


def panoptic_quality(pred: PanopticCloud, gt: PanopticCloud, taxonomy: ClassTaxonomy) -> PanopticReport:
    """PQ, SQ, RQ per class plus aggregates, PQ-dagger and the IoU family.

    Segments are (class, instance) groups for things and whole-class groups for
    stuff; a predicted and a ground-truth segment of the same class match when
    their point IoU exceeds 0.5. Classes with no segment on either side are
    left out of the aggregates.
    """
    return report_from_counts(panoptic_counts(pred, gt, taxonomy), taxonomy)
