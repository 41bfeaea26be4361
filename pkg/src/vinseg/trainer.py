"""Training the implicit semantic head on synthetic scenes (full or weak supervision)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .head import (
    DEFAULT_HIDDEN,
    HeadParams,
    QueryBatch,
    head_forward,
    head_init,
    head_loss_and_grad,
    softmax,
)
from .losses import SemanticLossConfig, inverse_sqrt_frequency_weights
from .metrics import confusion_matrix, iou_metrics
from .synth import Scene, make_rng, mask_labels
from .types import IGNORE
from .voxel import GridSpec, featurize

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay: ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``."""

    def __init__(self, n_params: int, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return theta - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * theta)


def cyclic_lr(step: int, base: float, peak: float, period: int) -> float:
    """Triangular schedule: ``base -> peak -> base`` every ``period`` steps."""
    phase = (step % period) / period
    return base + (peak - base) * (1 - abs(2 * phase - 1))


def _fold_scaler(params: HeadParams, mu: np.ndarray, sd: np.ndarray) -> HeadParams:
    """Params acting on ``x`` equivalent to ``params`` acting on ``(x - mu) / sd``."""
    out = params.copy()
    if np.all(mu == 0) and np.all(sd == 1):
        return out
    w0 = params.weights[0]
    out.weights[0] = w0 / sd[:, None]
    out.biases[0] = params.biases[0] - (mu / sd) @ w0
    return out


class ImplicitSemanticHead(ClassifierMixin, BaseEstimator):
    """MLP classifier over encoded voxel queries ``[rel_x, rel_y, rel_z, voxel features]``.

    Parameters
    ----------
    n_classes : int
        Number of semantic classes S; labels are ``0..S-1``.
    hidden_layer_sizes : tuple of int
        Hidden widths; the output layer is appended automatically.
    learning_rate, weight_decay : float
        AdamW step size and decoupled weight decay.
    lr_schedule : {"constant", "cyclic"}
        ``cyclic`` oscillates between ``learning_rate`` and ``10 * learning_rate``.
    batch_size, epochs, steps_per_epoch : int
        Each step draws ``batch_size`` supervised queries without replacement.
    lambda_lovasz : float
        Weight of the Lovász term added to the weighted cross-entropy.
    class_weight : "inv_sqrt", None or array of length S
        Cross-entropy class weights; ``inv_sqrt`` derives them from the
        supervised labels.
    standardize : bool
        Train on z-scored inputs (statistics from all rows of ``X``, labelled
        or not); the scaling is folded into the first layer afterwards, so
        ``params_`` always acts on raw inputs.
    random_state : int
        Seeds both initialisation and batch sampling.
    """

    def __init__(
        self,
        n_classes=6,
        hidden_layer_sizes=DEFAULT_HIDDEN,
        learning_rate=1e-3,
        weight_decay=0.01,
        lr_schedule="constant",
        batch_size=2048,
        epochs=5,
        steps_per_epoch=200,
        lambda_lovasz=1.0,
        class_weight="inv_sqrt",
        standardize=True,
        random_state=0,
    ):
        self.n_classes = n_classes
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.batch_size = batch_size
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.lambda_lovasz = lambda_lovasz
        self.class_weight = class_weight
        self.standardize = standardize
        self.random_state = random_state

    def _loss_config(self, y):
        if isinstance(self.class_weight, str):
            if self.class_weight != "inv_sqrt":
                raise ValueError(f"unknown class_weight {self.class_weight!r}")
            w = inverse_sqrt_frequency_weights(y, self.n_classes)
        elif self.class_weight is None:
            w = np.ones(self.n_classes)
        else:
            w = np.asarray(self.class_weight, dtype=np.float64)
        return SemanticLossConfig(tuple(w), float(self.lambda_lovasz))

    def fit(self, X, y, supervision_mask=None, init_params: Optional[HeadParams] = None, epoch_callback=None):
        """Train on rows where ``supervision_mask`` is True and ``y`` is not IGNORE.

        ``epoch_callback(epoch, params, mean_loss)`` runs after every epoch; its
        return values are collected in ``callback_results_``.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        keep = y != IGNORE
        if supervision_mask is not None:
            keep &= np.asarray(supervision_mask, dtype=bool)
        pool = np.flatnonzero(keep)
        if len(pool) == 0:
            raise ValueError("no supervised queries to train on")
        if y[pool].max() >= self.n_classes:
            raise ValueError("label exceeds n_classes")

        self.loss_config_ = self._loss_config(y[pool])
        if self.standardize:
            mu = X.mean(axis=0)
            sd = X.std(axis=0)
            sd[sd < 1e-12] = 1.0
            X = (X - mu) / sd
        else:
            mu, sd = np.zeros(X.shape[1]), np.ones(X.shape[1])
        if init_params is None:
            params = head_init(self.random_state, X.shape[1] - 3, self.n_classes, self.hidden_layer_sizes)
        else:
            params = _fold_scaler(init_params, -mu / sd, 1.0 / sd)
        self.initial_params_ = _fold_scaler(params, mu, sd)
        theta = params.flat()
        opt = AdamW(len(theta), lr=self.learning_rate, weight_decay=self.weight_decay)
        rng = make_rng(self.random_state, 7)
        bs = min(self.batch_size, len(pool))

        self.loss_history_ = []
        self.callback_results_ = []
        step = 0
        for epoch in range(self.epochs):
            losses = []
            for _ in range(self.steps_per_epoch):
                idx = pool[rng.choice(len(pool), size=bs, replace=False)]
                batch = QueryBatch.from_inputs(X[idx], y[idx])
                loss, grads = head_loss_and_grad(params, batch, self.loss_config_)
                if self.lr_schedule == "cyclic":
                    lr = cyclic_lr(step, self.learning_rate, 10 * self.learning_rate, 2 * self.steps_per_epoch)
                elif self.lr_schedule == "constant":
                    lr = self.learning_rate
                else:
                    raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
                theta = opt.step(theta, grads.flat(), lr)
                params = params.unflat(theta)
                losses.append(loss)
                step += 1
            mean_loss = math.fsum(losses) / max(len(losses), 1)
            self.loss_history_.append(mean_loss)
            log.info("epoch %d loss %.5f", epoch + 1, mean_loss)
            if epoch_callback is not None:
                self.callback_results_.append(epoch_callback(epoch, _fold_scaler(params, mu, sd), mean_loss))
        self.params_ = _fold_scaler(params, mu, sd)
        self.classes_ = np.arange(self.n_classes)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return head_forward(self.params_, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    lr_schedule: str = "constant"
    batch_size: int = 2048
    epochs: int = 5
    steps_per_epoch: int = 200
    label_fraction: float = 1.0
    lambda_lovasz: float = 1.0
    class_weight: str = "inv_sqrt"
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in (0, 1]")
        if min(self.batch_size, self.epochs, self.steps_per_epoch) < 1:
            raise ValueError("batch_size, epochs and steps_per_epoch must be >= 1")

    def estimator(self, n_classes: int) -> ImplicitSemanticHead:
        return ImplicitSemanticHead(
            n_classes=n_classes,
            hidden_layer_sizes=tuple(self.hidden),
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            lr_schedule=self.lr_schedule,
            batch_size=self.batch_size,
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            lambda_lovasz=self.lambda_lovasz,
            class_weight=self.class_weight,
            random_state=self.seed,
        )


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_miou: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_miou"]
        for e, (l, m) in enumerate(zip(self.train_loss, self.val_miou), 1):
            lines.append(f"{e},{l!r},{m!r}")
        return "\n".join(lines) + "\n"


def encode_scenes(scenes: Sequence[Scene], grid: GridSpec):
    """Stack the head inputs and gt labels of every point of every scene."""
    X, y, offsets = [], [], [0]
    for s in scenes:
        fmap = featurize(grid, s.cloud)
        X.append(fmap.encode(s.cloud.xyz))
        y.append(s.cloud.sem_label)
        offsets.append(offsets[-1] + len(s.cloud))
    if not X:
        return np.zeros((0, 13)), np.zeros(0, dtype=np.int64), offsets
    return np.vstack(X), np.concatenate(y), offsets


def supervision_mask(scenes: Sequence[Scene], fraction: float, seed: int) -> np.ndarray:
    return np.concatenate([mask_labels(len(s.cloud), fraction, seed, stream=i) for i, s in enumerate(scenes)])


def evaluate_miou(params: HeadParams, X: np.ndarray, y: np.ndarray, n_classes: int, chunk: int = 65536) -> float:
    pred = np.concatenate(
        [np.argmax(head_forward(params, X[i : i + chunk]), axis=1) for i in range(0, len(X), chunk)]
    )
    return iou_metrics(confusion_matrix(pred, y, n_classes)).miou


def train(
    scenes: Sequence[Scene],
    cfg: TrainConfig,
    grid: GridSpec,
    n_classes: int,
    val_scenes: Sequence[Scene] = (),
    init_params: Optional[HeadParams] = None,
):
    """Featurize, mask, optimise. Returns ``(HeadParams, TrainHistory)``.

    Validation mIoU is NaN for every epoch when no validation scenes are given.
    """
    X, y, _ = encode_scenes(scenes, grid)
    mask = supervision_mask(scenes, cfg.label_fraction, cfg.seed)
    if not np.any(mask & (y != IGNORE)):
        raise ValueError("empty supervision set")
    Xv, yv, _ = encode_scenes(val_scenes, grid)

    def on_epoch(epoch, params, loss):
        return evaluate_miou(params, Xv, yv, n_classes) if len(Xv) else float("nan")

    est = cfg.estimator(n_classes)
    est.fit(X, y, supervision_mask=mask, init_params=init_params, epoch_callback=on_epoch)
    hist = TrainHistory(list(est.loss_history_), list(est.callback_results_))
    return est.params_, hist


def grad_check(params: HeadParams, batch: QueryBatch, eps: float = 1e-5, loss_cfg: Optional[SemanticLossConfig] = None):
    """Max over parameters of ``|a - n| / max(|a|, |n|, 1e-8)`` (analytic vs central differences)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if loss_cfg is None:
        loss_cfg = SemanticLossConfig.uniform(params.n_classes, lambda_lovasz=0.0)
    _, grads = head_loss_and_grad(params, batch, loss_cfg)
    analytic = grads.flat()
    theta = params.flat()
    numeric = np.empty_like(theta)
    for i in range(len(theta)):
        orig = theta[i]
        theta[i] = orig + eps
        lp, _ = head_loss_and_grad(params.unflat(theta), batch, loss_cfg)
        theta[i] = orig - eps
        lm, _ = head_loss_and_grad(params.unflat(theta), batch, loss_cfg)
        theta[i] = orig
        numeric[i] = (lp - lm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
