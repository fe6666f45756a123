"""Supervised training of the surrogate: MSE loss, Adam with coupled L2,
plateau learning-rate schedule, best-validation retention."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import LabeledDataset
from .surrogate import MLP, backward_weights, forward

log = logging.getLogger(__name__)

REPORT_FORMAT = "cvsurrogate-training-report"
REPORT_VERSION = 1


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainingReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    scheduler_factor: float = 0.5
    scheduler_patience: int = 10
    scheduler_threshold: float = 1e-4
    min_lr: float = 1e-7
    batch_size: int = 256
    max_epochs: int = 200
    train_fraction: float = 0.8
    seed: int = 0
    epsilon: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must lie in (0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.scheduler_patience < 1:
            raise ValueError("scheduler_patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


def mse_loss(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {targets.shape}")
    if preds.size == 0:
        raise ValueError("empty batch")
    with np.errstate(over="ignore"):  # overflow surfaces as inf and is caught by the caller
        return float(np.mean((preds - targets) ** 2))


def mse_grad(preds, targets) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    return 2.0 * (preds - np.asarray(targets, dtype=np.float64)) / preds.size


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0, names=None):
    """One bias-corrected Adam update, in place.

    L2 is folded into the gradient (``g + weight_decay * theta``) before the
    moment updates. Returns ``(params, state)``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            where = names[i] if names else f"params[{i}]"
            raise NonFiniteGradientError(f"non-finite gradient in {where}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to beat ``best * (1 - threshold)`` for ``patience`` epochs in a row."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10,
                 threshold: float = 1e-4, min_lr: float = 1e-7):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0
        self.exhausted = False  # a reduction was due while already at the floor

    def step(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            if self.lr <= self.min_lr:
                self.exhausted = True
            self.lr = max(self.lr * self.factor, self.min_lr)
        return self.lr


def plateau_scheduler(history, patience: int, factor: float, current_lr: float,
                      threshold: float = 1e-4, min_lr: float = 1e-7) -> float:
    """Learning rate after replaying ``history`` through a fresh scheduler
    that starts at ``current_lr``."""
    sched = PlateauScheduler(current_lr, factor, patience, threshold, min_lr)
    for loss in history:
        sched.step(float(loss))
    return sched.lr


@dataclass
class TrainingReport:
    config: dict
    seed: int
    n_train: int
    n_val: int
    epochs: list[dict] = field(default_factory=list)
    lr_events: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    final_lr: float | None = None
    stop_reason: str = ""
    wall_time_s: float | None = None

    def to_dict(self) -> dict:
        d = {"format": REPORT_FORMAT, "version": REPORT_VERSION}
        d.update(asdict(self))
        if d["wall_time_s"] is None:
            del d["wall_time_s"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError("not a training report")
        d = {k: v for k, v in d.items() if k not in ("format", "version")}
        return cls(**d)


def _eval_loss(model: MLP, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    pred, _ = forward(model, x, mode="eval")
    return mse_loss(pred, y)


def train(model: MLP, dataset: LabeledDataset, cfg: TrainConfig | None = None, *, split=None,
          record_wall_time: bool = False):
    """Fit ``model`` in place; on return it holds the best-validation parameters.

    ``split`` is an optional ``(train_idx, val_idx)`` pair; by default the
    dataset's seeded split with ``cfg.train_fraction`` and ``cfg.seed``.
    Returns ``(model, report)``; raises :class:`TrainingDiverged` (carrying
    the partial report) when the loss stops being finite.
    """
    cfg = cfg or TrainConfig()
    if dataset.input_dim != model.input_dim:
        raise ValueError(f"dataset width {dataset.input_dim} does not match model input {model.input_dim}")
    train_idx, val_idx = split if split is not None else dataset.split(cfg.train_fraction, cfg.seed)
    xt, yt = dataset.inputs[train_idx], dataset.values[train_idx]
    xv, yv = dataset.inputs[val_idx], dataset.values[val_idx]

    report = TrainingReport(config=asdict(cfg), seed=cfg.seed, n_train=len(train_idx), n_val=len(val_idx))
    rng = np.random.default_rng([cfg.seed, 1])
    params = model.parameters()
    names = model.parameter_names()
    state = AdamState.zeros_like(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.epsilon)
    sched = PlateauScheduler(cfg.learning_rate, cfg.scheduler_factor, cfg.scheduler_patience,
                             cfg.scheduler_threshold, cfg.min_lr)
    best = [p.copy() for p in params]
    best_val = _eval_loss(model, xv, yv)
    report.best_epoch = 0
    t0 = time.perf_counter()

    if cfg.max_epochs == 0:
        report.stop_reason = "zero epoch budget"
    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(yt))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            pred, tape = forward(model, xt[batch], mode="train", rng=rng)
            loss = mse_loss(pred, yt[batch])
            if not np.isfinite(loss):
                report.stop_reason = f"non-finite training loss at epoch {epoch}"
                raise TrainingDiverged(report.stop_reason, report)
            total += loss * len(batch)
            grads = backward_weights(model, tape, mse_grad(pred, yt[batch]))
            try:
                adam_step(params, grads, state, lr, cfg.weight_decay, names)
            except NonFiniteGradientError as exc:
                report.stop_reason = f"epoch {epoch}: {exc}"
                raise TrainingDiverged(report.stop_reason, report) from exc
            model.version += 1

        train_loss = total / len(yt)
        val_loss = _eval_loss(model, xv, yv)
        if not np.isfinite(train_loss):
            report.stop_reason = f"non-finite training loss at epoch {epoch}"
            raise TrainingDiverged(report.stop_reason, report)
        report.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        if val_loss < best_val or not len(yv):  # no validation rows: keep the latest
            best_val = val_loss
            report.best_epoch = epoch
            for dst, src in zip(best, params):
                dst[...] = src

        new_lr = sched.step(val_loss)
        if new_lr != lr:
            report.lr_events.append({"epoch": epoch, "old_lr": lr, "new_lr": new_lr})
            log.info("epoch %d: lr %.3g -> %.3g", epoch, lr, new_lr)
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if sched.exhausted:
            report.stop_reason = f"learning rate at floor {cfg.min_lr:g} and plateau persisted"
            break
    else:
        if cfg.max_epochs:
            report.stop_reason = "max epochs reached"

    if report.epochs:
        model.load_parameters(best)
    report.best_val_loss = float(best_val)
    report.final_lr = sched.lr
    if record_wall_time:
        report.wall_time_s = time.perf_counter() - t0
    return model, report
