"""Semantic loss terms on class probabilities, each returning ``(value, dL/dprobs)``.

All reductions run in a fixed order so repeated evaluations are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .types import IGNORE, LossWeights

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SemanticLossConfig:
    class_weights: tuple[float, ...]
    lambda_lovasz: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=np.float64)
        object.__setattr__(self, "class_weights", tuple(float(v) for v in w))
        if w.ndim != 1 or len(w) == 0:
            raise ValueError("class_weights must be a non-empty vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("class weights must be finite, non-negative, and not all zero")
        if not (self.lambda_lovasz >= 0 and math.isfinite(self.lambda_lovasz)):
            raise ValueError("lambda_lovasz must be finite and >= 0")

    @classmethod
    def uniform(cls, n_classes: int, lambda_lovasz: float = 1.0) -> "SemanticLossConfig":
        return cls(tuple([1.0] * n_classes), lambda_lovasz)


def inverse_sqrt_frequency_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """``1/sqrt(freq)`` per class, rescaled to mean 1 over the classes that occur.

    Classes absent from ``labels`` get weight 0 (they can never be a target).
    """
    labels = np.asarray(labels).reshape(-1)
    labels = labels[labels != IGNORE]
    counts = np.bincount(labels, minlength=n_classes)[:n_classes].astype(np.float64)
    if counts.sum() == 0:
        return np.ones(n_classes)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = 1.0 / np.sqrt(counts[present] / counts.sum())
    return w / w[present].mean()


def _check_probs(probs, targets):
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or len(probs) != len(targets):
        raise ValueError(f"probs {probs.shape} and targets {targets.shape} do not align")
    if len(targets) and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise ValueError("target class id out of range")
    return probs, targets


def weighted_cross_entropy(probs, targets, weights, reduction: str = "mean"):
    """Class-weighted negative log likelihood.

    ``mean``: ``sum_n w[y_n] * -ln p_n[y_n] / sum_n w[y_n]``; ``sum`` drops the
    denominator. Probabilities below 1e-12 are clamped before the log, and the
    clamped entries get zero gradient.
    """
    probs, targets = _check_probs(probs, targets)
    weights = np.asarray(weights, dtype=np.float64)
    grad = np.zeros_like(probs)
    if len(targets) == 0:
        return 0.0, grad
    rows = np.arange(len(targets))
    p = probs[rows, targets]
    w = weights[targets]
    pc = np.maximum(p, PROB_FLOOR)
    terms = w * -np.log(pc)
    total = math.fsum(terms)
    if reduction == "sum":
        denom = 1.0
    elif reduction == "mean":
        denom = math.fsum(w)
        if denom == 0:
            return 0.0, grad
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    grad[rows, targets] = np.where(p > PROB_FLOOR, -w / (pc * denom), 0.0)
    return total / denom, grad


def lovasz_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard loss along a sorted ground-truth indicator."""
    fg_sorted = np.asarray(fg_sorted, dtype=np.float64)
    gts = fg_sorted.sum()
    intersection = gts - np.cumsum(fg_sorted)
    union = gts + np.cumsum(1.0 - fg_sorted)
    jaccard = 1.0 - intersection / union
    if len(jaccard) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, targets):
    """Lovász-softmax over classes present in ``targets``.

    For class ``c`` the errors are ``|1[y=c] - p[:, c]|``, sorted descending
    (ties broken by original index); the per-class loss is the dot product of
    the sorted errors with :func:`lovasz_grad`. Returns the mean over present
    classes and the gradient w.r.t. ``probs``.
    """
    probs, targets = _check_probs(probs, targets)
    grad = np.zeros_like(probs)
    present = np.unique(targets)
    if len(present) == 0:
        return 0.0, grad
    losses = []
    for c in present:
        fg = (targets == c).astype(np.float64)
        errors = np.abs(fg - probs[:, c])
        perm = np.lexsort((np.arange(len(errors)), -errors))
        g = lovasz_grad(fg[perm])
        losses.append(float(np.dot(errors[perm], g)))
        dm = np.empty_like(errors)
        dm[perm] = g
        # d|fg - p|/dp is -1 on foreground, +1 elsewhere
        grad[:, c] = np.where(fg > 0, -dm, dm)
    k = len(present)
    grad /= k
    return math.fsum(losses) / k, grad


def semantic_loss(probs, targets, cfg: SemanticLossConfig):
    ce, g_ce = weighted_cross_entropy(probs, targets, cfg.class_weights)
    if cfg.lambda_lovasz == 0:
        return ce, g_ce
    lv, g_lv = lovasz_softmax(probs, targets)
    return ce + cfg.lambda_lovasz * lv, g_ce + cfg.lambda_lovasz * g_lv


def total_loss(l_cls: float, l_reg: float, l_sem: float, w: Optional[LossWeights] = None) -> float:
    w = w or LossWeights()
    vals = (l_cls, l_reg, l_sem)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("loss components must be finite")
    return w.alpha_cls * l_cls + w.alpha_reg * l_reg + w.alpha_sem * l_sem
