"""Fuse detections and point semantics into per-point (class, instance) labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .types import BoundingBox7, ClassTaxonomy, PointCloud, containment_matrix


@dataclass
class PanopticCloud:
    sem_label: np.ndarray  # (N,) class ids, IGNORE allowed
    instance: np.ndarray  # (N,) 0 for stuff / unassigned

    def __post_init__(self):
        self.sem_label = np.asarray(self.sem_label, dtype=np.int64).reshape(-1)
        self.instance = np.asarray(self.instance, dtype=np.int64).reshape(-1)
        if len(self.sem_label) != len(self.instance):
            raise ValueError("sem_label and instance must have equal length")

    def __len__(self):
        return len(self.sem_label)

    @classmethod
    def from_cloud(cls, cloud: PointCloud) -> "PanopticCloud":
        if cloud.sem_label is None:
            raise ValueError("cloud has no semantic labels")
        inst = cloud.instance if cloud.instance is not None else np.zeros(len(cloud), dtype=np.int64)
        return cls(cloud.sem_label, inst)


def assign_instances(
    boxes: Sequence[BoundingBox7],
    cloud: PointCloud,
    taxonomy: ClassTaxonomy,
    require_class_match: bool = True,
) -> PanopticCloud:
    """Give each thing point the instance id of the best box that contains it.

    A box is a candidate for a point when it contains the point and, with
    ``require_class_match``, its class equals the point's label. The
    highest-scoring candidate wins (ties: smallest instance id). Stuff points and
    thing points without a candidate keep instance 0.
    """
    if cloud.sem_label is None:
        raise ValueError("cloud has no semantic labels")
    ids = [b.instance_id for b in boxes]
    if len(set(ids)) != len(ids):
        raise ValueError("instance ids must be unique")
    labels = cloud.sem_label
    instance = np.zeros(len(cloud), dtype=np.int64)
    thing = np.isin(labels, taxonomy.thing_ids)
    if not boxes or not thing.any():
        return PanopticCloud(labels.copy(), instance)

    inside = containment_matrix(boxes, cloud.xyz)
    # best box first; first claim sticks
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, boxes[i].instance_id))
    free = thing.copy()
    for i in order:
        b = boxes[i]
        cand = inside[i] & free
        if require_class_match:
            cand &= labels == b.class_id
        instance[cand] = b.instance_id
        free &= ~cand
    return PanopticCloud(labels.copy(), instance)
