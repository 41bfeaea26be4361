"""Deterministic synthetic lidar-like scenes: boxed thing objects over stuff layers.

Every random draw comes from a counter-based generator keyed by ``(seed, stream)``,
so scenes can be generated in any order or in parallel with identical results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .types import DEFAULT_TAXONOMY, BoundingBox7, ClassTaxonomy, PointCloud, containment_matrix

SURFACE_INSET = 1e-3  # surface samples sit this far inside the box (meters)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class ThingSpec:
    name: str
    count: tuple[int, int]  # inclusive range
    length: tuple[float, float]
    width: tuple[float, float]
    height: tuple[float, float]
    clearance: tuple[float, float]  # gap between ground and box bottom
    points: int
    intensity: float


@dataclass(frozen=True)
class SceneConfig:
    extent: float = 20.0  # scene is [-extent, extent]^2
    taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY
    things: tuple[ThingSpec, ...] = (
        ThingSpec("car", (6, 10), (3.8, 4.8), (1.7, 2.0), (1.4, 1.7), (0.15, 0.3), 450, 0.55),
        ThingSpec("truck", (2, 4), (6.0, 9.0), (2.3, 2.6), (2.8, 3.6), (0.3, 0.5), 900, 0.45),
        ThingSpec("pedestrian", (6, 10), (0.5, 0.8), (0.5, 0.7), (1.6, 1.9), (0.08, 0.12), 120, 0.30),
    )
    ground_class: str = "drivable_surface"
    ground_points: int = 30000
    ground_intensity: float = 0.12
    wall_class: str = "manmade"
    wall_points: int = 8000
    wall_height: tuple[float, float] = (3.0, 6.0)
    wall_intensity: float = 0.35
    vegetation_class: str = "vegetation"
    vegetation_blobs: tuple[int, int] = (5, 7)
    vegetation_points: int = 800  # per blob
    vegetation_radius: tuple[float, float] = (1.0, 2.2)
    vegetation_intensity: float = 0.22
    intensity_sigma: float = 0.07
    noise_sigma: float = 0.02
    max_attempts: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("scene extent must be positive")
        if min(self.ground_points, self.wall_points, self.vegetation_points) <= 0:
            raise ValueError("point densities must be positive")
        if self.noise_sigma < 0 or self.intensity_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        for t in self.things:
            if not self.taxonomy.is_thing(self.taxonomy.index(t.name)):
                raise ValueError(f"{t.name} is not a thing class")
        for name in (self.ground_class, self.wall_class, self.vegetation_class):
            self.taxonomy.index(name)


@dataclass
class Scene:
    cloud: PointCloud  # sem_label and instance hold ground truth
    boxes: list[BoundingBox7]


def _rect_corners(cx, cy, l, w, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hx = np.array([c, s]) * l / 2
    hy = np.array([-s, c]) * w / 2
    ctr = np.array([cx, cy])
    return np.array([ctr + hx + hy, ctr - hx + hy, ctr - hx - hy, ctr + hx - hy])


def bev_overlap(a: BoundingBox7, b: BoundingBox7, margin: float = 0.0) -> bool:
    """Separating-axis test on the BEV rectangles, each grown by ``margin``."""
    ra = _rect_corners(a.cx, a.cy, a.l + 2 * margin, a.w + 2 * margin, a.yaw)
    rb = _rect_corners(b.cx, b.cy, b.l + 2 * margin, b.w + 2 * margin, b.yaw)
    for rect in (ra, rb):
        for i in range(2):
            edge = rect[i + 1] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = ra @ axis, rb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _place_boxes(cfg: SceneConfig, rng: np.random.Generator) -> list[BoundingBox7]:
    tax = cfg.taxonomy
    wanted = []
    for spec in cfg.things:
        n = int(rng.integers(spec.count[0], spec.count[1] + 1))
        wanted += [spec] * n
    boxes: list[BoundingBox7] = []
    attempts = 0
    lim = cfg.extent - 3.0
    for spec in wanted:
        while attempts < cfg.max_attempts:
            attempts += 1
            l = rng.uniform(*spec.length)
            w = rng.uniform(*spec.width)
            h = rng.uniform(*spec.height)
            clear = rng.uniform(*spec.clearance)
            x, y = rng.uniform(-lim, lim, size=2)
            yaw = math.pi - rng.uniform(0.0, 2 * math.pi)  # (-pi, pi]
            cand = BoundingBox7(
                float(x), float(y), clear + h / 2, l, w, h, yaw, tax.index(spec.name), 1.0, len(boxes) + 1
            )
            if not any(bev_overlap(cand, b, margin=0.25) for b in boxes):
                boxes.append(cand)
                break
        else:
            break  # attempt budget spent: keep the objects placed so far
    return boxes


def _surface_samples(box: BoundingBox7, n: int, sigma: float, rng) -> np.ndarray:
    """Points on the four sides and the top of ``box`` (the underside is never seen)."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    sgn = np.where(face % 2 == 0, 0.5, -0.5)
    xf, yf, top = face < 2, (face >= 2) & (face < 4), face == 4
    local[xf] = np.stack([sgn[xf] * l, u[xf] * w, v[xf] * h], axis=1)
    local[yf] = np.stack([u[yf] * l, sgn[yf] * w, v[yf] * h], axis=1)
    local[top] = np.stack([u[top] * l, v[top] * w, np.full(top.sum(), 0.5 * h)], axis=1)
    if sigma > 0:
        local += rng.normal(0.0, sigma, size=local.shape)
    half = np.array([l, w, h]) / 2 - SURFACE_INSET
    local = np.clip(local, -half, half)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.cx + c * local[:, 0] - s * local[:, 1]
    world[:, 1] = box.cy + s * local[:, 0] + c * local[:, 1]
    world[:, 2] = box.cz + local[:, 2]
    return world


def _intensity(mean: float, cfg: SceneConfig, n: int, rng) -> np.ndarray:
    return np.clip(rng.normal(mean, cfg.intensity_sigma, size=n), 0.0, 1.0)


def generate_scene(cfg: SceneConfig = SceneConfig(), seed: Optional[int] = None, stream: int = 0) -> Scene:
    """Build one scene; ``seed`` defaults to ``cfg.seed``."""
    rng = make_rng(cfg.seed if seed is None else seed, stream)
    tax = cfg.taxonomy
    E = cfg.extent
    sigma = cfg.noise_sigma
    boxes = _place_boxes(cfg, rng)

    xyz, inten, lab, inst = [], [], [], []

    def add(points, mean, cls, instance=0):
        xyz.append(points)
        inten.append(_intensity(mean, cfg, len(points), rng))
        lab.append(np.full(len(points), cls, dtype=np.int64))
        inst.append(np.full(len(points), instance, dtype=np.int64))

    specs = {tax.index(s.name): s for s in cfg.things}
    for b in boxes:
        spec = specs[b.class_id]
        add(_surface_samples(b, spec.points, sigma, rng), spec.intensity, b.class_id, b.instance_id)

    n_things = sum(len(p) for p in xyz)

    g = cfg.ground_points
    ground = np.column_stack([rng.uniform(-E, E, size=(g, 2)), rng.normal(0.0, sigma, size=g)])
    add(ground, cfg.ground_intensity, tax.index(cfg.ground_class))

    wall_h = rng.uniform(*cfg.wall_height)
    nw = cfg.wall_points
    side = rng.integers(0, 4, size=nw)
    along = rng.uniform(-E, E, size=nw)
    pos = np.where(side % 2 == 0, E - 0.5, -(E - 0.5)) + rng.normal(0.0, sigma, size=nw)
    wx = np.where(side < 2, pos, along)
    wy = np.where(side < 2, along, pos)
    add(np.column_stack([wx, wy, rng.uniform(0.0, wall_h, size=nw)]), cfg.wall_intensity, tax.index(cfg.wall_class))

    n_blobs = int(rng.integers(cfg.vegetation_blobs[0], cfg.vegetation_blobs[1] + 1))
    veg_cls = tax.index(cfg.vegetation_class)
    placed = 0
    for _ in range(cfg.max_attempts):
        if placed >= n_blobs:
            break
        r = rng.uniform(*cfg.vegetation_radius)
        cx, cy = rng.uniform(-(E - 2 - r), E - 2 - r, size=2)
        probe = BoundingBox7(float(cx), float(cy), 0.0, 2 * r, 2 * r, 1.0, 0.0, 0)
        if any(bev_overlap(probe, b, margin=0.25) for b in boxes):
            continue
        cz = r + rng.uniform(0.5, 1.5)
        d = rng.normal(size=(cfg.vegetation_points, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rad = r * (1.0 + rng.normal(0.0, 0.08, size=(cfg.vegetation_points, 1)))
        add(np.array([cx, cy, cz]) + d * rad, cfg.vegetation_intensity, veg_cls)
        placed += 1

    pts = np.vstack(xyz).astype(np.float32)
    cloud = PointCloud(pts, np.concatenate(inten), np.concatenate(lab), None, np.concatenate(inst))
    # stuff never lives inside an object box
    if boxes:
        inside = containment_matrix(boxes, cloud.xyz).any(axis=0)
        inside[:n_things] = False
        keep = ~inside
        cloud = PointCloud(
            cloud.xyz[keep], cloud.intensity[keep], cloud.sem_label[keep], None, cloud.instance[keep]
        )
    return Scene(cloud, boxes)


def generate_scenes(cfg: SceneConfig, n: int, seed: Optional[int] = None, first_stream: int = 0, threads: int = 1):
    seed = cfg.seed if seed is None else seed
    streams = range(first_stream, first_stream + n)
    if threads <= 1:
        return [generate_scene(cfg, seed, s) for s in streams]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda s: generate_scene(cfg, seed, s), streams))


@dataclass(frozen=True)
class DetectionNoise:
    center_sigma: float = 0.1  # meters
    size_sigma: float = 0.05  # relative
    yaw_sigma: float = 0.05  # radians
    score_beta: tuple[float, float] = (5.0, 2.0)
    p_flip: float = 0.2
    drop_rate: float = 0.0
    dup_rate: float = 0.0

    def __post_init__(self):
        for name in ("p_flip", "drop_rate", "dup_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(self.center_sigma, self.size_sigma, self.yaw_sigma) < 0:
            raise ValueError("jitter sigmas must be non-negative")

    @property
    def is_zero(self) -> bool:
        return (
            self.center_sigma == 0 and self.size_sigma == 0 and self.yaw_sigma == 0
            and self.p_flip == 0 and self.drop_rate == 0 and self.dup_rate == 0
        )


ZERO_NOISE = DetectionNoise(0.0, 0.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0)


def _wrap(yaw: float) -> float:
    y = math.remainder(yaw, 2 * math.pi)
    return math.pi if y == -math.pi else y


def perturb_detections(
    gt: Sequence[BoundingBox7],
    noise: DetectionNoise,
    taxonomy: ClassTaxonomy,
    seed: int,
    stream: int = 0,
) -> tuple[list[BoundingBox7], np.ndarray]:
    """Simulate a detector's output from ground-truth boxes.

    Returns the detections and, per detection, the index of its source gt box.
    With all noise terms zero, detections equal ``gt`` with score 1.
    """
    rng = make_rng(seed, (1 << 20) + stream)
    things = taxonomy.thing_ids
    zero = noise.is_zero
    next_id = max((b.instance_id for b in gt), default=0) + 1
    out, src = [], []
    for gi, b in enumerate(gt):
        if noise.drop_rate > 0 and rng.uniform() < noise.drop_rate:
            continue
        copies = 2 if noise.dup_rate > 0 and rng.uniform() < noise.dup_rate else 1
        for c in range(copies):
            if zero:
                d = BoundingBox7(b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.class_id, 1.0, b.instance_id)
            else:
                dx, dy, dz = rng.normal(0.0, noise.center_sigma, size=3)
                sl, sw, sh = np.exp(rng.normal(0.0, noise.size_sigma, size=3))
                yaw = _wrap(b.yaw + rng.normal(0.0, noise.yaw_sigma))
                score = float(rng.beta(*noise.score_beta))
                cls = b.class_id
                if rng.uniform() < noise.p_flip and len(things) > 1:
                    others = [k for k in things if k != cls]
                    cls = int(others[rng.integers(len(others))])
                iid = b.instance_id if c == 0 else next_id
                d = BoundingBox7(
                    b.cx + dx, b.cy + dy, b.cz + dz, b.l * sl, b.w * sw, b.h * sh, yaw, cls, score, iid
                )
            if c:
                next_id += 1
            out.append(d)
            src.append(gi)
    return out, np.asarray(src, dtype=np.int64)


def mask_labels(n_points: int, fraction: float, seed: int, stream: int = 0) -> np.ndarray:
    """Supervision mask with exactly ``ceil(fraction * n_points)`` True entries."""
    if not 0 < fraction <= 1:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    k = min(n_points, math.ceil(fraction * n_points - 1e-9))
    mask = np.zeros(n_points, dtype=bool)
    if fraction == 1:
        mask[:] = True
        return mask
    rng = make_rng(seed, (2 << 20) + stream)
    mask[rng.choice(n_points, size=k, replace=False)] = True
    return mask


def noisy_semantics(
    cloud: PointCloud,
    taxonomy: ClassTaxonomy,
    seed: int,
    p_noise: float = 0.1,
    score_beta: tuple[float, float] = (4.0, 2.0),
    stream: int = 0,
) -> PointCloud:
    """Stand-in segmentation output: gt labels with random corruption and Beta scores."""
    if cloud.sem_label is None:
        raise ValueError("cloud has no ground-truth labels")
    rng = make_rng(seed, (3 << 20) + stream)
    n = len(cloud)
    labels = cloud.sem_label.copy()
    flip = rng.uniform(size=n) < p_noise
    labels[flip] = rng.integers(0, taxonomy.n_classes, size=int(flip.sum()))
    scores = rng.beta(*score_beta, size=n)
    out = cloud.copy()
    out.sem_label = labels
    out.sem_score = scores
    return out
