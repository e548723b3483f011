"""Training machinery: loss, SGD with momentum, plateau scheduling, freezing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .layers import Layer, LayerSpec, PARAMETERIZED_KINDS


def softmax_cross_entropy(logits: np.ndarray, one_hot: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy over the batch and its logit gradient.

    Probabilities are clipped to [1e-12, 1] before the log; the gradient is
    (softmax(logits) - one_hot) / batch_size.

    Raises:
        NumericError: non-finite logits.
        ShapeError: logits and one_hot disagree.
    """
    if logits.shape != one_hot.shape:
        raise ShapeError(f"logits {logits.shape} vs one_hot {one_hot.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in loss computation")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.sum(one_hot * np.log(np.clip(probs, 1e-12, 1.0))) / n)
    return loss, (probs - one_hot) / n


def sgd_momentum_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD step: v <- momentum*v - lr*g; p <- p + v. Updates in place."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ShapeError(
            f"param {param.shape}, grad {grad.shape}, velocity {velocity.shape} disagree"
        )
    velocity *= momentum
    velocity -= lr * grad
    param += velocity
    return param, velocity


class SGDMomentum:
    """Momentum optimizer over a layer list; frozen layers are skipped.

    Gradients on frozen layers may well be computed by backward passes, but
    they are discarded here and the frozen parameters (and their zero
    velocities) never change.
    """

    def __init__(self, layers: Sequence[Layer], lr: float, momentum: float = 0.9):
        self.layers = list(layers)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self) -> None:
        for i, layer in enumerate(self.layers):
            if not layer.trainable or not layer.params:
                continue
            for name, param in layer.params.items():
                grad = layer.grads.get(name)
                if grad is None:
                    continue
                vel = self._velocity.setdefault((i, name), np.zeros_like(param))
                sgd_momentum_step(param, grad, vel, self.lr, self.momentum)


class PlateauScheduler:
    """Reduce-on-plateau: multiply lr by ``factor`` after ``patience``
    consecutive epochs without improvement of the monitored value."""

    def __init__(
        self,
        lr0: float,
        factor: float = 0.5,
        patience: int = 3,
        min_delta: float = 1e-9,
        mode: str = "min",
    ):
        if not 0.0 < factor < 1.0:
            raise ConfigError(f"plateau factor must be in (0, 1), got {factor}")
        if patience < 1:
            raise ConfigError(f"plateau patience must be >= 1, got {patience}")
        if mode not in ("min", "max"):
            raise ConfigError(f"plateau mode must be 'min' or 'max', got {mode}")
        self.lr = float(lr0)
        self.factor = float(factor)
        self.patience = int(patience)
        self.min_delta = float(min_delta)
        self.mode = mode
        self._best = math.inf if mode == "min" else -math.inf
        self._bad = 0

    def update(self, value: float) -> float:
        """Record one epoch's monitored value; returns the lr for the next epoch."""
        improved = (
            value < self._best - self.min_delta
            if self.mode == "min"
            else value > self._best + self.min_delta
        )
        if improved:
            self._best = value
            self._bad = 0
        else:
            self._bad += 1
            if self._bad >= self.patience:
                self.lr *= self.factor
                self._bad = 0
        return self.lr


def plateau_schedule(
    history: Sequence[float],
    factor: float = 0.5,
    patience: int = 3,
    lr0: float = 0.001,
    min_delta: float = 1e-9,
) -> list[float]:
    """Learning rate in effect at each epoch for a validation-loss history.

    The rate halves immediately after any run of ``patience`` consecutive
    epochs without a strict improvement (by more than ``min_delta``) over
    the best value so far; an improvement resets the counter and reductions
    can repeat.
    """
    sched = PlateauScheduler(lr0, factor=factor, patience=patience, min_delta=min_delta)
    lrs = []
    for loss in history:
        lrs.append(sched.lr)
        sched.update(loss)
    return lrs


def freeze_fraction(
    specs: Sequence[LayerSpec],
    trainable_fraction: float,
    head_start: int | None = None,
) -> list[bool]:
    """Freeze mask for partial fine-tuning.

    The last ceil(trainable_fraction * L) parameterized backbone layers stay
    trainable, where L counts parameterized layers before ``head_start``
    (default: no head, the whole list is backbone). Head layers are always
    trainable; parameterless backbone layers are marked False (nothing to
    train either way).

    Raises:
        ConfigError: fraction outside (0, 1].
    """
    if not 0.0 < trainable_fraction <= 1.0:
        raise ConfigError(f"trainable_fraction must be in (0, 1], got {trainable_fraction}")
    if head_start is None:
        head_start = len(specs)
    backbone_param_idx = [
        i for i in range(head_start) if specs[i].kind in PARAMETERIZED_KINDS
    ]
    n_train = math.ceil(trainable_fraction * len(backbone_param_idx))
    unfrozen = set(backbone_param_idx[len(backbone_param_idx) - n_train :])
    return [i >= head_start or i in unfrozen for i in range(len(specs))]


def count_parameters(layers: Sequence[Layer]) -> tuple[int, int]:
    """(trainable, non_trainable) parameter totals; they partition the sum."""
    trainable = sum(l.param_count() for l in layers if l.trainable)
    frozen = sum(l.param_count() for l in layers if not l.trainable)
    return trainable, frozen


@dataclass
class TrainConfig:
    """Hyperparameters for the shared training protocol."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.001
    momentum: float = 0.9
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_delta: float = 1e-9
    monitor: str = "val_loss"  # or "val_acc"
    trainable_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.plateau_factor < 1.0:
            problems.append(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.monitor not in ("val_loss", "val_acc"):
            problems.append(f"monitor must be val_loss or val_acc, got {self.monitor!r}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class TrainHistory:
    """Per-epoch training curves, exportable as CSV for plotting."""

    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")

    def append(self, train_loss, train_acc, val_loss, val_acc, lr) -> None:
        self.train_loss.append(float(train_loss))
        self.train_acc.append(float(train_acc))
        self.val_loss.append(float(val_loss))
        self.val_acc.append(float(val_acc))
        self.lr.append(float(lr))

    def __len__(self) -> int:
        return len(self.train_loss)

    def rows(self) -> list[dict[str, float]]:
        return [
            {
                "epoch": e + 1,
                "train_loss": self.train_loss[e],
                "train_acc": self.train_acc[e],
                "val_loss": self.val_loss[e],
                "val_acc": self.val_acc[e],
                "lr": self.lr[e],
            }
            for e in range(len(self))
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainHistory":
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.append(
                    float(row["train_loss"]),
                    float(row["train_acc"]),
                    float(row["val_loss"]),
                    float(row["val_acc"]),
                    float(row["lr"]),
                )
        return hist
