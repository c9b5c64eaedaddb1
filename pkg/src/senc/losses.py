"""Training objective: pixel cross-entropy + global Dice + nucleus focal loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LOG_FLOOR = 1e-12
DICE_EPS = 1e-8


@dataclass
class LossConfig:
    gamma: float = 2.0
    tau: np.ndarray | None = None  # per-class weights; None means all ones
    dice_eps: float = DICE_EPS

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("focal gamma must be >= 0")
        if self.tau is not None:
            self.tau = np.asarray(self.tau, dtype=np.float64)
            if np.any(self.tau <= 0):
                raise ConfigError("class weights must be positive")


def class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Reciprocal class proportions, rescaled to sum to ``num_classes``.

    Classes absent from ``labels`` are treated as having one sample.
    """
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)[:num_classes].astype(np.float64)
    counts = np.maximum(counts, 1.0)
    inv = counts.sum() / counts
    return inv * (num_classes / inv.sum())


def _check(x: Tensor, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"prediction {x.shape} and target {y.shape} differ")
    return y


def ce_seg(x: Tensor, y: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-likelihood; ``x`` holds probabilities on the last axis."""
    y = _check(x, y)
    pixels = int(np.prod(x.shape[:-1]))
    logp = T.log(T.clamp_min(x, LOG_FLOOR))
    return T.mul(T.sum(T.mul(logp, Tensor(y))), -1.0 / pixels)


def dice_seg(x: Tensor, y: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """One minus a single global Dice quotient over all pixels and classes."""
    y = _check(x, y)
    inter = T.sum(T.mul(x, Tensor(y)))
    total = T.sum(x) + float(y.sum())
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def focal_cls(t: Tensor, y: np.ndarray, cfg: LossConfig | None = None) -> Tensor:
    """``-1/N sum_i tau_y (1 - t_iy)^gamma log t_iy``; ``y`` is integer labels or one-hot rows."""
    cfg = cfg or LossConfig()
    y = np.asarray(y)
    if y.ndim == 2:
        y = y.argmax(axis=1)
    y = y.astype(np.int64).reshape(-1)
    n = t.shape[0]
    if n == 0:
        return Tensor(np.array(0.0))
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} predictions")
    p = T.index(t, (np.arange(n), y))
    tau = np.ones(t.shape[1]) if cfg.tau is None else cfg.tau
    logp = T.log(T.clamp_min(p, LOG_FLOOR))
    weight = T.power(1.0 - p, cfg.gamma)
    terms = T.mul(T.mul(weight, logp), Tensor(tau[y]))
    return T.mul(T.sum(terms), -1.0 / n)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(num_classes)[labels]


@dataclass
class LossParts:
    total: Tensor
    ce: float
    dice: float
    focal: float
    extra: dict = field(default_factory=dict)


def total_loss(sem_probs: Tensor, sem_target: np.ndarray, t: Tensor | None, labels: np.ndarray, cfg: LossConfig) -> LossParts:
    """Unweighted sum of the three terms."""
    ce = ce_seg(sem_probs, sem_target)
    dice = dice_seg(sem_probs, sem_target, cfg.dice_eps)
    focal = focal_cls(t, labels, cfg) if t is not None and t.shape[0] else Tensor(np.array(0.0))
    total = dice + ce + focal
    return LossParts(total, ce.item(), dice.item(), focal.item())
