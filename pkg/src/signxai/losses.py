"""Activation and loss functions as plain numpy, float64 throughout.

These are the reference definitions; the TensorFlow training step is tested
against them.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, NumericError

LOG_CLAMP = 1e-12


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(m, axis: int = -1) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise NumericError("softmax of an empty vector")
    if not np.all(np.isfinite(m)):
        raise NumericError("softmax input contains non-finite values")
    z = np.exp(m - m.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def smoothed_target(y: int, eps: float, k: int) -> np.ndarray:
    """Label-smoothed target ``(1 - eps) * onehot(y) + eps / k``.

    With ``eps > 0`` every entry is at least ``eps / k``.
    """
    if not 0 <= eps < 1:
        raise ConfigError(f"label smoothing must be in [0, 1), got {eps}")
    if not 0 <= y < k:
        raise DataError(f"label {y} outside [0, {k})")
    s = np.full(k, eps / k)
    s[y] += 1.0 - eps
    return s


def _check_distribution(r: np.ndarray) -> None:
    if r.ndim != 1 or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-6:
        raise DataError("predicted distribution must be non-negative and sum to 1 within 1e-6")


def cross_entropy(target, r) -> float:
    """H(target, r) = -sum_k target(k) log r(k), with r clamped at 1e-12."""
    r = np.asarray(r, dtype=np.float64)
    _check_distribution(r)
    return float(-np.sum(np.asarray(target, dtype=np.float64) * np.log(np.maximum(r, LOG_CLAMP))))


def cross_entropy_lsr(r, y: int, eps: float, k: int) -> float:
    """Cross-entropy of ``r`` against the label-smoothed target of class ``y``."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (k,):
        raise DataError(f"expected a length-{k} distribution, got shape {r.shape}")
    return cross_entropy(smoothed_target(y, eps, k), r)


def cross_entropy_lsr_decomposed(r, y: int, eps: float, k: int) -> float:
    """Same loss written as ``(1 - eps) * H(onehot, r) + eps * H(uniform, r)``."""
    hard = cross_entropy(smoothed_target(y, 0.0, k), r)
    uniform = cross_entropy(np.full(k, 1.0 / k), r)
    return (1.0 - eps) * hard + eps * uniform


def logit_gradient(m, y: int, eps: float) -> np.ndarray:
    """Gradient of ``cross_entropy_lsr(softmax(m), y, eps)`` with respect to the logits ``m``."""
    m = np.asarray(m, dtype=np.float64)
    return softmax(m) - smoothed_target(y, eps, m.size)
