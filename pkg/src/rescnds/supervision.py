"""Per-head softmax / cross-entropy and the decaying auxiliary-loss weight."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LabelError, NumericError, ParameterError, ScheduleError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SupervisionSchedule:
    alpha0: float = 0.3
    total_epochs: int = 50
    decay: str = "closed"  # or "recursive"

    def __post_init__(self):
        if self.alpha0 < 0:
            raise ParameterError("alpha0 must be >= 0")
        if self.total_epochs < 1:
            raise ParameterError("total_epochs must be >= 1")
        if self.decay not in ("closed", "recursive"):
            raise ParameterError(f"unknown decay form {self.decay!r}")


def softmax_prob(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ParameterError(f"logits must be [N, K>=2], got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"label out of range [0, {k})")
    return labels


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Batch mean of -ln p[true class], with p clamped at 1e-12."""
    labels = _check_labels(labels, probs.shape[1])
    if len(labels) != probs.shape[0]:
        raise LabelError("one label per row required")
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def softmax_xent_backward(logits: np.ndarray, labels) -> np.ndarray:
    """d(mean cross-entropy)/d(logits) = (softmax - onehot) / N."""
    p = softmax_prob(logits)
    labels = _check_labels(labels, p.shape[1])
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


def alpha_at(sched: SupervisionSchedule, t: int) -> float:
    n = sched.total_epochs
    if t < 0 or t > n:
        raise ScheduleError(f"epoch {t} outside [0, {n}]")
    if sched.decay == "closed":
        return sched.alpha0 * (1.0 - t / n)
    a = sched.alpha0
    for j in range(1, t + 1):
        a *= 1.0 - j / n
    return a


def combined_loss(main_loss: float, aux_loss: float, alpha_t: float) -> float:
    if alpha_t < 0 or math.isnan(alpha_t):
        raise ParameterError(f"alpha_t must be >= 0, got {alpha_t}")
    return main_loss + alpha_t * aux_loss
