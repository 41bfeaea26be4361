"""Shared domain types: class taxonomy, point clouds, 7-DoF boxes, loss weights."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

IGNORE = 0xFFFF
"""Sentinel class id for unlabeled / ignored points."""

THING, STUFF = "thing", "stuff"


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered semantic classes, each either a countable ``thing`` or a ``stuff`` region.

    Class ids are the positions in ``classes``; the ignore id is :data:`IGNORE`.
    """

    classes: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple((str(n), str(k)) for n, k in self.classes))
        kinds = [k for _, k in self.classes]
        bad = [k for k in kinds if k not in (THING, STUFF)]
        if bad:
            raise ValueError(f"unknown class kind(s) {bad}; expected 'thing' or 'stuff'")
        if THING not in kinds or STUFF not in kinds:
            raise ValueError("taxonomy needs at least one thing and one stuff class")
        names = [n for n, _ in self.classes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names in taxonomy")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.classes]

    @property
    def thing_ids(self) -> list[int]:
        return [i for i, (_, k) in enumerate(self.classes) if k == THING]

    @property
    def stuff_ids(self) -> list[int]:
        return [i for i, (_, k) in enumerate(self.classes) if k == STUFF]

    def is_thing(self, class_id: int) -> bool:
        return 0 <= class_id < self.n_classes and self.classes[class_id][1] == THING

    def index(self, name: str) -> int:
        return self.names.index(name)


DEFAULT_TAXONOMY = ClassTaxonomy(
    (
        ("car", THING),
        ("truck", THING),
        ("pedestrian", THING),
        ("drivable_surface", STUFF),
        ("manmade", STUFF),
        ("vegetation", STUFF),
    )
)


@dataclass
class PointCloud:
    """Points with optional per-point semantics.

    ``xyz`` and ``intensity`` are stored as float32 (the on-disk precision);
    scores are float64 so repaired scores survive comparisons exactly.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    sem_label: Optional[np.ndarray] = None
    sem_score: Optional[np.ndarray] = None
    instance: Optional[np.ndarray] = None

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        n = len(self.xyz)
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float32).reshape(-1)
        if len(self.intensity) != n:
            raise ValueError(f"intensity has length {len(self.intensity)}, expected {n}")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")
        for name, dtype in (("sem_label", np.int64), ("sem_score", np.float64), ("instance", np.int64)):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.ascontiguousarray(arr, dtype=dtype).reshape(-1)
            if len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")
            setattr(self, name, arr)

    def __len__(self):
        return len(self.xyz)

    def copy(self) -> "PointCloud":
        def _c(a):
            return None if a is None else a.copy()

        return PointCloud(
            self.xyz.copy(), self.intensity.copy(), _c(self.sem_label), _c(self.sem_score), _c(self.instance)
        )


@dataclass(frozen=True)
class BoundingBox7:
    """Oriented 3D box: center, size (l along heading, w across, h up), yaw about z."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int
    score: float = 1.0
    instance_id: int = 1

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got {(self.l, self.w, self.h)}")
        if not np.all(np.isfinite([self.cx, self.cy, self.cz, self.yaw, self.score])):
            raise ValueError("box parameters must be finite")
        if self.instance_id <= 0:
            raise ValueError("instance_id must be a positive integer (0 means 'no instance')")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw, self.class_id, self.score, self.instance_id],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "BoundingBox7":
        a = list(a)
        if len(a) != 10:
            raise ValueError(f"expected 10 box scalars, got {len(a)}")
        return cls(*map(float, a[:7]), int(a[7]), float(a[8]), int(a[9]))

    def with_class(self, class_id: int) -> "BoundingBox7":
        return replace(self, class_id=int(class_id))


def validate_detections(boxes: Sequence[BoundingBox7], taxonomy: ClassTaxonomy) -> None:
    ids = [b.instance_id for b in boxes]
    if len(set(ids)) != len(ids):
        raise ValueError("instance ids must be unique within a detection set")
    for b in boxes:
        if not taxonomy.is_thing(b.class_id):
            raise ValueError(f"box {b.instance_id} has non-thing class {b.class_id}")


@dataclass(frozen=True)
class LossWeights:
    alpha_cls: float = 1.0
    alpha_reg: float = 0.25
    alpha_sem: float = 1.0

    def __post_init__(self):
        if min(self.alpha_cls, self.alpha_reg, self.alpha_sem) < 0:
            raise ValueError("loss weights must be non-negative")


def _to_box_frame(box: BoundingBox7, xyz: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    # rotate by -yaw
    return np.stack([c * dx + s * dy, -s * dx + c * dy, xyz[:, 2] - box.cz], axis=1)


def points_in_box(box: BoundingBox7, xyz: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside the closed box (boundary counts as inside)."""
    local = _to_box_frame(box, xyz)
    half = np.array([box.l, box.w, box.h]) / 2.0
    return np.all(np.abs(local) <= half, axis=1)


def box_contains(box: BoundingBox7, p: Sequence[float]) -> bool:
    return bool(points_in_box(box, np.asarray(p, dtype=np.float64)[:3])[0])


def containment_matrix(boxes: Sequence[BoundingBox7], xyz: np.ndarray) -> np.ndarray:
    """(len(boxes), N) boolean matrix; row i is ``points_in_box(boxes[i], xyz)``."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(boxes), len(xyz)), dtype=bool)
    for i, b in enumerate(boxes):
        # cheap bounding-circle prefilter
        r = 0.5 * np.sqrt(b.l**2 + b.w**2) * (1 + 1e-9) + 1e-9
        near = (np.abs(xyz[:, 0] - b.cx) <= r) & (np.abs(xyz[:, 1] - b.cy) <= r)
        idx = np.flatnonzero(near)
        if len(idx):
            out[i, idx] = points_in_box(b, xyz[idx])
    return out
