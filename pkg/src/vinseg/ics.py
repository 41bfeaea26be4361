"""InConsistency Suppression: repair box classes from point evidence, then point classes from boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .types import BoundingBox7, ClassTaxonomy, PointCloud, containment_matrix, validate_detections


@dataclass(frozen=True)
class IcsParams:
    c_gamma: float = 1.0
    m_p: float = 0.1
    c_alpha: float = 1.0  # declared by the algorithm but unused in its body

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.c_gamma, self.m_p, self.c_alpha)):
            raise ValueError("ICS parameters must be finite")
        if self.c_gamma < 0:
            raise ValueError("c_gamma must be >= 0")
        if not 0 <= self.m_p <= 1:
            raise ValueError("m_p must lie in [0, 1]")


@dataclass(frozen=True)
class BoxChange:
    instance_id: int
    old_class: int
    new_class: int
    reason: str  # "swap" or "override"
    partner: int = 0  # instance id of the swap partner


@dataclass(frozen=True)
class PointChange:
    index: int
    old_class: int
    new_class: int
    old_score: float
    new_score: float
    instance_id: int  # box that imposed the label


@dataclass
class IcsLog:
    box_changes: list[BoxChange] = field(default_factory=list)
    point_changes: list[PointChange] = field(default_factory=list)

    def __bool__(self):
        return bool(self.box_changes or self.point_changes)

    def to_text(self) -> str:
        lines = []
        for c in self.box_changes:
            extra = f" partner={c.partner}" if c.reason == "swap" else ""
            lines.append(f"box {c.instance_id} {c.old_class}->{c.new_class} {c.reason}{extra}")
        for c in self.point_changes:
            lines.append(
                f"point {c.index} {c.old_class}->{c.new_class} score {c.old_score!r}->{c.new_score!r} box={c.instance_id}"
            )
        return "\n".join(lines) + ("\n" if lines else "")


def rank_boxes(boxes: Sequence[BoundingBox7]) -> list[int]:
    """Indices of ``boxes`` by descending score, ties by ascending instance id."""
    return sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, boxes[i].instance_id))


def _pick_class(labels, scores, box_class, box_score, thing_ids, c_gamma):
    # count, score and correctness criteria over the inconsistent points
    n = len(labels)
    vals = {}
    for k in thing_ids:
        sel = labels == k
        cnt = int(sel.sum())
        if cnt == 0:
            val = 0.0
        else:
            alpha = cnt / n
            beta = math.fsum(scores[sel]) / cnt
            gamma = 1.0 + (box_score**c_gamma if k == box_class else 0.0)
            val = alpha * beta * gamma
        vals[k] = val
    top = max(vals.values())
    if vals.get(box_class, -1.0) == top:
        return box_class
    return min(k for k, v in vals.items() if v == top)


def fix_boxes(boxes, cloud, taxonomy, params, inside=None, log=None):
    """Phase A. Returns the relabelled boxes (input order) and the ranking used."""
    order = rank_boxes(boxes)
    labels = [boxes[i].class_id for i in order]
    if inside is None:
        inside = containment_matrix(boxes, cloud.xyz)
    ranked_inside = inside[order]
    thing_ids = taxonomy.thing_ids
    # True while p disagrees with every already-processed box that contains it
    unclaimed = np.ones(len(cloud), dtype=bool)
    for i in range(len(order)):
        members = ranked_inside[i]
        sel = members & unclaimed
        if sel.any():
            b = boxes[order[i]]
            k_star = _pick_class(
                cloud.sem_label[sel], cloud.sem_score[sel], labels[i], b.score, thing_ids, params.c_gamma
            )
            if k_star != labels[i]:
                partner = next((j for j in range(i + 1, len(order)) if labels[j] == k_star), None)
                if partner is not None:
                    if log is not None:
                        bi, bj = boxes[order[i]].instance_id, boxes[order[partner]].instance_id
                        log.box_changes.append(BoxChange(bi, labels[i], k_star, "swap", bj))
                        log.box_changes.append(BoxChange(bj, labels[partner], labels[i], "swap", bi))
                    labels[i], labels[partner] = labels[partner], labels[i]
                else:
                    if log is not None:
                        log.box_changes.append(BoxChange(boxes[order[i]].instance_id, labels[i], k_star, "override"))
                    labels[i] = k_star
        # later boxes only see points that disagree with this box's (final) label
        unclaimed &= ~members | (cloud.sem_label != labels[i])
    out = list(boxes)
    for r, idx in enumerate(order):
        if out[idx].class_id != labels[r]:
            out[idx] = out[idx].with_class(labels[r])
    return out, order


def fix_points(boxes, cloud, params, order=None, inside=None, log=None):
    """Phase B, in place on ``cloud``: lift low-confidence points to their box's class."""
    if order is None:
        order = rank_boxes(boxes)
    if inside is None:
        inside = containment_matrix(boxes, cloud.xyz)
    ranked_inside = inside[order]
    # a point is only touched by the highest-ranked box containing it
    claimed_above = np.zeros(len(cloud), dtype=bool)
    owner = np.full(len(cloud), -1)
    for i in range(len(order)):
        owner[ranked_inside[i] & ~claimed_above] = i
        claimed_above |= ranked_inside[i]
    for i in range(len(order) - 1, -1, -1):
        b = boxes[order[i]]
        cand = np.flatnonzero((owner == i) & (cloud.sem_score < b.score - params.m_p))
        for p in cand:
            old_c, old_s = int(cloud.sem_label[p]), float(cloud.sem_score[p])
            cloud.sem_label[p] = b.class_id
            cloud.sem_score[p] = b.score
            if log is not None:
                log.point_changes.append(PointChange(int(p), old_c, b.class_id, old_s, b.score, b.instance_id))
    return cloud


def ics(boxes: Sequence[BoundingBox7], cloud: PointCloud, taxonomy: ClassTaxonomy, params: IcsParams = IcsParams()):
    """Run both repair phases. Inputs are not modified.

    Returns ``(boxes', cloud', log)`` with boxes in their input order.
    """
    if cloud.sem_label is None or cloud.sem_score is None:
        raise ValueError("ICS needs per-point semantic labels and scores")
    validate_detections(boxes, taxonomy)
    boxes = list(boxes)
    cloud = cloud.copy()
    log = IcsLog()
    if not boxes:
        return boxes, cloud, log
    inside = containment_matrix(boxes, cloud.xyz)
    boxes, order = fix_boxes(boxes, cloud, taxonomy, params, inside=inside, log=log)
    fix_points(boxes, cloud, params, order=order, inside=inside, log=log)
    return boxes, cloud, log
