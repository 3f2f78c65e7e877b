"""Homogeneous linear classifiers trained first on S_A, then fine-tuned on S_B.

Binary mode uses the exponential loss on margins ``y * (w . x)`` with
``y = 2 * label - 1``; multiclass mode uses softmax cross-entropy over a
``[num_classes, d]`` weight matrix. Predictions on a tracked set are logged
at the end of every epoch (column 0 holds the state before any update).
"""

from __future__ import annotations

import json
import logging
import warnings
from collections.abc import Callable
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .datagen import DatasetSpec, Split, sample_splits

log = logging.getLogger(__name__)

LOSSES = ("exponential", "softmax")
OPTIMIZERS = ("gd", "sgd", "adam")
CONVERGENCE_RULES = ("margin", "accuracy", "none")
DIVERGENCE_PATIENCE = 5


class DivergenceError(RuntimeError):
    """Full-batch loss kept increasing (or overflowed): the step size is too large."""


class NonConvergenceWarning(UserWarning):
    pass


@dataclass
class LinearModel:
    weights: np.ndarray

    @property
    def binary(self) -> bool:
        return self.weights.ndim == 1

    @classmethod
    def init(cls, d: int, num_classes: int, binary: bool, seed: int, std: float = 0.01) -> LinearModel:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(11,))))
        shape = (d,) if binary else (num_classes, d)
        return cls(std * rng.standard_normal(shape))

    def copy(self) -> LinearModel:
        return LinearModel(self.weights.copy())

    def scores(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights.T if not self.binary else X @ self.weights

    def predict(self, X: np.ndarray) -> np.ndarray:
        s = self.scores(X)
        if self.binary:
            return (s > 0).astype(int)
        return np.argmax(s, axis=1)

    def evaluate(self, X: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Correctness and confidence on ``labels`` for each row of ``X``."""
        s = self.scores(X)
        if self.binary:
            m = signed(labels) * s
            # A zero score has no sign and counts as a miss.
            return m > 0, _sigmoid(m)
        p = _softmax(s)
        rows = np.arange(len(labels))
        return np.argmax(s, axis=1) == labels, p[rows, labels]

    def margins(self, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
        s = self.scores(X)
        if self.binary:
            return signed(labels) * s
        rows = np.arange(len(labels))
        own = s[rows, labels]
        other = s.copy()
        other[rows, labels] = -np.inf
        return own - other.max(axis=1)

    def save(self, path: str | Path) -> None:
        doc = {"shape": list(self.weights.shape), "weights": [repr(float(v)) for v in self.weights.ravel()]}
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> LinearModel:
        doc = json.loads(Path(path).read_text())
        return cls(np.array([float(v) for v in doc["weights"]]).reshape(doc["shape"]))


def signed(labels: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(labels, dtype=float) - 1.0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for one phase.

    The exponential loss is summed over the batch (so full-batch GD matches
    ``w <- w + eta * sum_i exp(-z_i) y_i x_i``); cross-entropy is averaged.
    ``convergence_rule="accuracy"`` stops after ``patience`` consecutive
    epochs at 100% accuracy; ``"margin"`` once every margin is >= 1;
    ``"none"`` always runs ``max_epochs``.
    """

    loss: str = "softmax"
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    batch_size: int = 10
    max_epochs: int = 100
    convergence_rule: str = "accuracy"
    patience: int = 5
    rng_seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    init_std: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.convergence_rule not in CONVERGENCE_RULES:
            raise ValueError(f"convergence_rule must be one of {CONVERGENCE_RULES}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size <= 0 or self.max_epochs < 0 or self.patience <= 0:
            raise ValueError("batch_size and patience must be positive, max_epochs non-negative")

    @property
    def binary(self) -> bool:
        return self.loss == "exponential"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PredictionHistory:
    phase: str
    example_ids: np.ndarray
    correct: np.ndarray  # bool [tracked, epochs + 1]
    confidence: np.ndarray  # float [tracked, epochs + 1]
    losses: list[float] = field(default_factory=list)
    converged: bool = False
    converged_epoch: int | None = None

    @property
    def epochs(self) -> int:
        return self.correct.shape[1] - 1

    def row(self, example_id: int) -> np.ndarray:
        i = int(np.flatnonzero(self.example_ids == example_id)[0])
        return self.correct[i]


# -- optimiser steps ----------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    velocity: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def loss_and_grad(model: LinearModel, X: np.ndarray, labels: np.ndarray, loss: str) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss, gradient and per-example coefficients ``-dl/dz`` (binary only)."""
    if loss == "exponential":
        y = signed(labels)
        with np.errstate(over="ignore", invalid="ignore"):
            coef = np.exp(-y * (X @ model.weights))
            grad = -(coef * y) @ X
        return float(coef.sum()), grad, coef
    s = X @ model.weights.T
    p = _softmax(s)
    rows = np.arange(len(labels))
    nll = -np.log(np.maximum(p[rows, labels], 1e-300))
    p[rows, labels] -= 1.0
    grad = p.T @ X / len(labels)
    return float(nll.mean()), grad, np.zeros(0)


def sgd_step(model: LinearModel, grad: np.ndarray, cfg: TrainConfig, state: OptimizerState | None = None) -> LinearModel:
    """Plain (optionally heavy-ball, weight-decayed) gradient step."""
    g = grad + cfg.weight_decay * model.weights if cfg.weight_decay else grad
    if cfg.momentum and state is not None:
        state.velocity = g if state.velocity is None else cfg.momentum * state.velocity + g
        g = state.velocity
    return LinearModel(model.weights - cfg.learning_rate * g)


def adam_step(model: LinearModel, grad: np.ndarray, cfg: TrainConfig, state: OptimizerState) -> LinearModel:
    """Bias-corrected Adam update."""
    g = grad + cfg.weight_decay * model.weights if cfg.weight_decay else grad
    state.step += 1
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * g * g
    m_hat = state.m / (1 - cfg.beta1**state.step)
    v_hat = state.v / (1 - cfg.beta2**state.step)
    return LinearModel(model.weights - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps))


StepHook = Callable[[int, np.ndarray, np.ndarray, LinearModel], None]


def train_phase(
    model: LinearModel,
    data: Split,
    tracked: Split,
    cfg: TrainConfig,
    *,
    phase: str = "A",
    step_hook: StepHook | None = None,
) -> tuple[LinearModel, PredictionHistory]:
    """Train on ``data`` until the convergence rule fires or ``max_epochs``.

    ``step_hook(epoch, batch_rows, coef, new_model)`` runs after every
    update; ``coef`` holds ``-dl/dz`` per batch row for the exponential loss.
    """
    if cfg.binary != model.binary:
        raise ValueError("loss/model mismatch: exponential loss needs a binary (vector) model")
    X, y = data.features, data.labels
    Xt, yt = tracked.features, tracked.labels
    T = cfg.max_epochs
    correct = np.zeros((len(tracked), T + 1), dtype=bool)
    confidence = np.zeros((len(tracked), T + 1))
    correct[:, 0], confidence[:, 0] = model.evaluate(Xt, yt)

    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(int(cfg.rng_seed), spawn_key=(13, 0 if phase == "A" else 1)))
    )
    state = OptimizerState()
    full_batch = cfg.optimizer == "gd"
    streak = 0
    rising = 0
    prev_loss = np.inf
    losses: list[float] = []
    converged_epoch: int | None = None
    n = len(y)
    all_rows = np.arange(n)
    cached = None  # full-batch: end-of-epoch loss/grad reused by the next step

    for epoch in range(1, T + 1):
        batches = [all_rows] if full_batch else np.array_split(rng.permutation(n), max(1, -(-n // cfg.batch_size)))
        for rows in batches:
            if len(rows) == 0:
                continue
            if cached is not None:
                loss, grad, coef = cached
            else:
                loss, grad, coef = loss_and_grad(model, X[rows], y[rows], cfg.loss)
            if full_batch:
                if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                    raise DivergenceError(f"loss overflowed at epoch {epoch}")
                rising = rising + 1 if loss > prev_loss else 0
                if rising >= DIVERGENCE_PATIENCE:
                    raise DivergenceError(
                        f"full-batch loss increased for {DIVERGENCE_PATIENCE} consecutive epochs "
                        f"(epoch {epoch}, lr={cfg.learning_rate}); reduce the learning rate"
                    )
                prev_loss = loss
            if cfg.optimizer == "adam":
                model = adam_step(model, grad, cfg, state)
            else:
                model = sgd_step(model, grad, cfg, state)
            if step_hook is not None:
                step_hook(epoch, rows, coef, model)
        correct[:, epoch], confidence[:, epoch] = model.evaluate(Xt, yt)
        end = loss_and_grad(model, X, y, cfg.loss)
        cached = end if full_batch else None
        losses.append(end[0])
        met, streak = _rule_met(model, X, y, cfg, streak)
        if met:
            converged_epoch = epoch
            correct = correct[:, : epoch + 1]
            confidence = confidence[:, : epoch + 1]
            break

    history = PredictionHistory(
        phase,
        tracked.example_ids.copy(),
        correct,
        confidence,
        losses,
        converged=converged_epoch is not None or cfg.convergence_rule == "none",
        converged_epoch=converged_epoch,
    )
    if converged_epoch is None and cfg.convergence_rule != "none" and T > 0:
        warnings.warn(
            f"phase {phase}: convergence rule {cfg.convergence_rule!r} not met within {T} epochs",
            NonConvergenceWarning,
            stacklevel=2,
        )
    return model, history


def _rule_met(model: LinearModel, X: np.ndarray, y: np.ndarray, cfg: TrainConfig, streak: int) -> tuple[bool, int]:
    if cfg.convergence_rule == "none":
        return False, streak
    if cfg.convergence_rule == "margin":
        return bool(np.min(model.margins(X, y)) >= 1.0), streak
    ok, _ = model.evaluate(X, y)
    streak = streak + 1 if ok.all() else 0
    return streak >= cfg.patience, streak


@dataclass
class TwoSplitRun:
    spec: DatasetSpec
    cfg_a: TrainConfig
    cfg_b: TrainConfig
    split_a: Split
    split_b: Split
    model_a: LinearModel
    model_b: LinearModel
    history_a: PredictionHistory
    history_b: PredictionHistory
    history_b_on_b: PredictionHistory | None = None


def two_split_run(
    spec: DatasetSpec,
    cfg_a: TrainConfig,
    cfg_b: TrainConfig,
    *,
    track_b: bool = False,
    splits: tuple[Split, Split] | None = None,
) -> TwoSplitRun:
    """Train from random init on S_A, then continue on S_B, tracking S_A throughout."""
    split_a, split_b = splits if splits is not None else sample_splits(spec)
    if cfg_a.binary != cfg_b.binary:
        raise ValueError("both phases must use the same loss family")
    if cfg_a.binary and spec.num_classes != 2:
        raise ValueError("exponential loss requires a two-class spec")
    model0 = LinearModel.init(spec.d, spec.num_classes, cfg_a.binary, cfg_a.rng_seed, cfg_a.init_std)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonConvergenceWarning)
        model_a, hist_a = train_phase(model0, split_a, split_a, cfg_a, phase="A")
        tracked_b = _concat(split_a, split_b) if track_b else split_a
        model_b, hist_b_all = train_phase(model_a, split_b, tracked_b, cfg_b, phase="B")
    for w in caught:
        log.warning("%s", w.message)
    hist_b = hist_b_all
    hist_bb = None
    if track_b:
        na = len(split_a)
        hist_b = _slice_history(hist_b_all, slice(0, na))
        hist_bb = _slice_history(hist_b_all, slice(na, None))
    return TwoSplitRun(spec, cfg_a, cfg_b, split_a, split_b, model_a, model_b, hist_a, hist_b, hist_bb)


def _concat(a: Split, b: Split) -> Split:
    return Split(
        "AB",
        np.concatenate([a.example_ids, b.example_ids]),
        np.vstack([a.features, b.features]),
        np.concatenate([a.labels, b.labels]),
        np.concatenate([a.true_labels, b.true_labels]),
        np.concatenate([a.group_ids, b.group_ids]),
        np.concatenate([a.provenance, b.provenance]),
    )


def _slice_history(h: PredictionHistory, sl: slice) -> PredictionHistory:
    return replace(h, example_ids=h.example_ids[sl], correct=h.correct[sl], confidence=h.confidence[sl])


def retrain(split: Split, cfg: TrainConfig, d: int, num_classes: int) -> LinearModel:
    """Fresh model trained on ``split`` (no tracking beyond the split itself)."""
    model0 = LinearModel.init(d, num_classes, cfg.binary, cfg.rng_seed, cfg.init_std)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        model, _ = train_phase(model0, split, split.subset(np.arange(0)), cfg, phase="A")
    return model
