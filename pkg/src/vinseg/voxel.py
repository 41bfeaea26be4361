"""Voxel rasterization, grid/center coordinate math and the hand-crafted voxel featurizer.

Axis convention: grid index ``(i, j, k)`` addresses ``(z, y, x)``; dims are ``(D, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .types import PointCloud

N_FEATURES = 10
FEATURE_NAMES = (
    "log_count",
    "mean_intensity",
    "mean_dx",
    "mean_dy",
    "mean_dz",
    "max_z",
    "min_z",
    "z_span",
    "mean_range",
    "occupied",
)


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float]  # (x0, y0, z0), meters
    voxel_size: tuple[float, float, float]  # (vx, vy, vz), meters
    dims: tuple[int, int, int]  # (D, H, W) -> (z, y, x)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.dims) != 3:
            raise ValueError("origin, voxel_size and dims must each have 3 entries")
        if min(self.voxel_size) <= 0:
            raise ValueError(f"voxel sizes must be positive, got {self.voxel_size}")
        if min(self.dims) <= 0:
            raise ValueError(f"grid dims must be positive, got {self.dims}")

    @property
    def center(self) -> np.ndarray:
        """Real-world center of the whole grid as (x, y, z)."""
        D, H, W = self.dims
        ext = np.array([W, H, D], dtype=np.float64) * np.array(self.voxel_size)
        return np.array(self.origin) + ext / 2.0

    @property
    def n_voxels(self) -> int:
        D, H, W = self.dims
        return D * H * W


def _raw_index(spec: GridSpec, xyz: np.ndarray) -> np.ndarray:
    """Unclipped floor indices in (i, j, k) order, shape (N, 3), int64."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    o = np.array(spec.origin)
    v = np.array(spec.voxel_size)
    kji = np.floor((xyz - o) / v)
    return kji[:, ::-1].astype(np.int64)


def grid_indices(spec: GridSpec, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`grid_index_of`: returns ``(idx (N,3), inside (N,))``."""
    idx = _raw_index(spec, xyz)
    inside = np.all((idx >= 0) & (idx < np.array(spec.dims)), axis=1)
    return idx, inside


def grid_index_of(spec: GridSpec, p: Sequence[float]) -> Optional[tuple[int, int, int]]:
    """Voxel ``(i, j, k)`` containing ``p``, or ``None`` when outside the grid.

    A point exactly on a cell boundary lands in the upper cell (floor convention).
    """
    idx, inside = grid_indices(spec, np.asarray(p, dtype=np.float64)[:3])
    if not inside[0]:
        return None
    return tuple(int(v) for v in idx[0])


def nearest_voxels(spec: GridSpec, xyz: np.ndarray) -> np.ndarray:
    idx = _raw_index(spec, xyz)
    return np.clip(idx, 0, np.array(spec.dims) - 1)


def nearest_voxel(spec: GridSpec, p: Sequence[float]) -> tuple[int, int, int]:
    """Index of the voxel closest to ``p``; per-axis clamp of the floor index."""
    return tuple(int(v) for v in nearest_voxels(spec, np.asarray(p, dtype=np.float64)[:3])[0])


def voxel_centers(spec: GridSpec, idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3)
    if np.any(idx < 0) or np.any(idx >= np.array(spec.dims)):
        raise IndexError("voxel index out of range")
    o = np.array(spec.origin)
    v = np.array(spec.voxel_size)
    return o + (idx[:, ::-1] + 0.5) * v


def voxel_center(spec: GridSpec, idx: Sequence[int]) -> tuple[float, float, float]:
    return tuple(float(c) for c in voxel_centers(spec, idx)[0])


@dataclass
class FeatureMap:
    spec: GridSpec
    data: np.ndarray  # (C, D, H, W) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[1:] != self.spec.dims:
            raise ValueError(f"feature map shape {self.data.shape} does not match grid dims {self.spec.dims}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    def lookup(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Relative positions and voxel features for query points.

        Points outside the grid use the nearest voxel; the relative position is
        then measured from that voxel's center (and may be large).
        """
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        idx = nearest_voxels(self.spec, xyz)
        rel = xyz - voxel_centers(self.spec, idx)
        feats = self.data[:, idx[:, 0], idx[:, 1], idx[:, 2]].T.astype(np.float64)
        return rel, feats

    def encode(self, xyz: np.ndarray) -> np.ndarray:
        """Head inputs ``[rel_x, rel_y, rel_z, features...]``, shape (N, 3 + C)."""
        rel, feats = self.lookup(xyz)
        return np.hstack([rel, feats])


def featurize(spec: GridSpec, cloud: PointCloud) -> FeatureMap:
    """Rasterize a cloud into the 10-channel hand-crafted feature map.

    Only points whose floor index lands inside the grid contribute. Channels:
    ``log(1+count)``, mean intensity, mean x/y/z offsets from the voxel center
    in voxel-size units, max z, min z, z span, mean distance to the grid
    center / 10 and an occupancy flag. Empty voxels are all zero.
    """
    D, H, W = spec.dims
    data = np.zeros((N_FEATURES, D, H, W), dtype=np.float64)
    xyz = cloud.xyz.astype(np.float64)
    idx, inside = grid_indices(spec, xyz)
    if not inside.any():
        return FeatureMap(spec, data)

    xyz = xyz[inside]
    idx = idx[inside]
    inten = cloud.intensity[inside].astype(np.float64)
    flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), spec.dims)
    # sort by (voxel, x, y, z, intensity) so reductions are independent of input order
    order = np.lexsort((inten, xyz[:, 2], xyz[:, 1], xyz[:, 0], flat))
    flat, xyz, idx, inten = flat[order], xyz[order], idx[order], inten[order]

    offs = (xyz - voxel_centers(spec, idx)) / np.array(spec.voxel_size)
    rng = np.linalg.norm(xyz - spec.center, axis=1) / 10.0

    n = spec.n_voxels
    count = np.bincount(flat, minlength=n).astype(np.float64)
    occ = count > 0
    safe = np.where(occ, count, 1.0)

    def mean(values):
        return np.bincount(flat, weights=values, minlength=n) / safe

    zmax = np.full(n, -np.inf)
    zmin = np.full(n, np.inf)
    np.maximum.at(zmax, flat, xyz[:, 2])
    np.minimum.at(zmin, flat, xyz[:, 2])
    zmax[~occ] = 0.0
    zmin[~occ] = 0.0

    chans = [
        np.log1p(count),
        mean(inten),
        mean(offs[:, 0]),
        mean(offs[:, 1]),
        mean(offs[:, 2]),
        zmax,
        zmin,
        zmax - zmin,
        mean(rng),
        occ.astype(np.float64),
    ]
    for c, ch in enumerate(chans):
        data[c] = np.where(occ, ch, 0.0).reshape(D, H, W)
    return FeatureMap(spec, data)


class VoxelQueryEncoder(TransformerMixin, BaseEstimator):
    """Featurize a reference cloud on ``fit``; encode arbitrary query points on ``transform``.

    ``fit`` takes an (N, 4) array of ``x, y, z, intensity``; ``transform`` takes
    (M, 3+) query coordinates and returns (M, 3 + 10) head inputs.
    """

    def __init__(self, grid: Optional[GridSpec] = None):
        self.grid = grid

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] < 4:
            raise ValueError(f"expected (N, 4) x/y/z/intensity array, got shape {X.shape}")
        if self.grid is None:
            raise ValueError("VoxelQueryEncoder needs a GridSpec")
        self.feature_map_ = featurize(self.grid, PointCloud(X[:, :3], X[:, 3]))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "feature_map_")
        X = check_array(X, dtype=np.float64)
        return self.feature_map_.encode(X[:, :3])
