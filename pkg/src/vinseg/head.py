"""Implicit semantic head: an MLP from (relative position, voxel feature) to class logits.

Hidden layers are affine + ReLU, the output layer is affine; everything runs in
float64 so analytic gradients can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .losses import SemanticLossConfig, semantic_loss
from .voxel import FeatureMap

DEFAULT_HIDDEN = (256, 128, 64, 32)


@dataclass
class HeadParams:
    weights: list[np.ndarray]  # layer l: (fan_in, fan_out)
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != len(b):
                raise ValueError(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l and w.shape[0] != self.weights[l - 1].shape[1]:
                raise ValueError(f"layer {l} fan-in {w.shape[0]} != previous fan-out")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def unflat(self, vec: np.ndarray) -> "HeadParams":
        vec = np.asarray(vec, dtype=np.float64)
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos : pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(vec[pos : pos + b.size].copy())
            pos += b.size
        if pos != len(vec):
            raise ValueError(f"flat vector has {len(vec)} entries, expected {pos}")
        return HeadParams(ws, bs)

    def copy(self) -> "HeadParams":
        return HeadParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "HeadParams":
        return HeadParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


@dataclass
class QueryBatch:
    rel_pos: np.ndarray  # (N, 3) meters
    features: np.ndarray  # (N, C)
    targets: Optional[np.ndarray] = None  # (N,) class ids
    mask: Optional[np.ndarray] = None  # (N,) bool, True = supervised

    def __post_init__(self):
        self.rel_pos = np.asarray(self.rel_pos, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(len(self.rel_pos), -1)
        if len(self.features) != len(self.rel_pos):
            raise ValueError("rel_pos and features must have the same number of rows")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
            if len(self.targets) != len(self):
                raise ValueError("targets length mismatch")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
            if len(self.mask) != len(self):
                raise ValueError("mask length mismatch")

    def __len__(self):
        return len(self.rel_pos)

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.rel_pos, self.features])

    @classmethod
    def from_inputs(cls, X, targets=None, mask=None) -> "QueryBatch":
        X = np.asarray(X, dtype=np.float64)
        return cls(X[:, :3], X[:, 3:], targets, mask)


def head_init(seed: int, C: int, S: int, hidden: Sequence[int] = DEFAULT_HIDDEN) -> HeadParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    if C < 1 or S < 1:
        raise ValueError("C and S must be >= 1")
    rng = np.random.default_rng(seed)
    sizes = [3 + C, *hidden, S]
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return HeadParams(ws, bs)


def _forward(params: HeadParams, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != params.n_inputs:
        raise ValueError(f"input has shape {X.shape}, head expects {params.n_inputs} columns")
    if len(X) == 1:
        # BLAS takes a vector path for one row; go through the matrix path so
        # every row is bitwise independent of the batch it sits in
        acts, pre = _forward(params, np.vstack([X, X]))
        return [a[:1] for a in acts], [z[:1] for z in pre]
    acts = [X]
    pre = []
    h = X
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if l == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def head_forward(params: HeadParams, batch) -> np.ndarray:
    """Pre-softmax logits, shape (N, S). ``batch`` is a QueryBatch or an input matrix."""
    X = batch.inputs if isinstance(batch, QueryBatch) else np.asarray(batch, dtype=np.float64)
    return _forward(params, X)[0][-1]


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def query_semantics(params: HeadParams, fmap: FeatureMap, points):
    """Per-point class distribution, argmax label (ties -> lowest id) and max probability."""
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if fmap.n_channels + 3 != params.n_inputs:
        raise ValueError(f"feature map has {fmap.n_channels} channels, head expects {params.n_inputs - 3}")
    probs = softmax(head_forward(params, fmap.encode(xyz)))
    labels = np.argmax(probs, axis=1)
    scores = probs[np.arange(len(probs)), labels]
    return probs, labels, scores


def head_loss_and_grad(params: HeadParams, batch: QueryBatch, loss_cfg: SemanticLossConfig):
    """Semantic loss over the supervised queries and its exact gradient.

    Queries with ``mask == False`` contribute neither loss nor gradient; with no
    supervised query the result is ``(0.0, zeros)``.
    """
    if batch.targets is None:
        raise ValueError("batch has no targets")
    keep = np.ones(len(batch), dtype=bool) if batch.mask is None else batch.mask
    grads = params.zeros_like()
    if not keep.any():
        return 0.0, grads
    X = batch.inputs[keep]
    y = batch.targets[keep]
    acts, pre = _forward(params, X)
    probs = softmax(acts[-1])
    loss, g_p = semantic_loss(probs, y, loss_cfg)

    # softmax backward: dL/dz = s * (g - <s, g>)
    delta = probs * (g_p - np.sum(probs * g_p, axis=1, keepdims=True))
    for l in range(len(params.weights) - 1, -1, -1):
        grads.weights[l] = acts[l].T @ delta
        grads.biases[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ params.weights[l].T) * (pre[l - 1] > 0)
    return loss, grads


def has_kink(params: HeadParams, batch: QueryBatch, margin: float = 1e-4, lovasz: bool = True) -> bool:
    """True if a ReLU pre-activation or a Lovász error ordering sits within ``margin`` of a tie.

    Central differences straddling such points are not valid gradient oracles.
    """
    keep = np.ones(len(batch), dtype=bool) if batch.mask is None else batch.mask
    if not keep.any():
        return False
    X = batch.inputs[keep]
    acts, pre = _forward(params, X)
    for z in pre[:-1]:
        if np.any(np.abs(z) < margin):
            return True
    if lovasz and batch.targets is not None:
        probs = softmax(acts[-1])
        y = batch.targets[keep]
        for c in np.unique(y):
            err = np.sort(np.abs((y == c) - probs[:, c]))
            if len(err) > 1 and np.min(np.diff(err)) < margin:
                return True
    return False
