"""
dense tensor kernel shared by the transformer, the construction and the metrics

Tensors are plain numpy arrays. Verification paths use float64 throughout.
"""

from collections.abc import Callable

import numpy as np

from ..errors import DimensionError, NumericError, TargetIndexError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """matrix product of a (m x k) and b (k x n)"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f'cannot multiply {a.shape} by {b.shape}')
    return a @ b


def row_softmax(x: np.ndarray) -> np.ndarray:
    """softmax over the last axis, with per-row max subtraction"""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """
    Loss and gradient for a single position.
    Returns (-log softmax(logits)[target], softmax(logits) - onehot(target)).
    """
    if logits.ndim != 1:
        raise DimensionError(f'expected a vector of logits, got shape {logits.shape}')
    if not 0 <= target < logits.shape[0]:
        raise TargetIndexError(f'target {target} out of range for {logits.shape[0]} classes')

    log_probs = log_softmax(logits)
    grad = np.exp(log_probs)
    grad[target] -= 1.0
    return float(-log_probs[target]), grad


def finite_diff_check(
        f: Callable[[np.ndarray], float],
        params: np.ndarray,
        analytic_grad: np.ndarray,
        eps: float = 1e-5,
        ) -> float:
    """
    Compares analytic_grad against central differences of f at params, coordinate by coordinate.
    Returns the maximal relative error |fd - an| / max(1, |fd|, |an|).
    """
    if eps <= 0:
        raise ValueError(f'eps must be positive, got {eps}')
    if params.shape != analytic_grad.shape:
        raise DimensionError(f'params {params.shape} and gradient {analytic_grad.shape} differ')

    x = np.array(params, dtype=np.float64, copy=True)
    worst = 0.0
    for i in range(x.size):
        original = x.flat[i]
        x.flat[i] = original + eps
        f_plus = f(x)
        x.flat[i] = original - eps
        f_minus = f(x)
        x.flat[i] = original

        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f'non-finite evaluation at coordinate {i}')

        fd = (f_plus - f_minus) / (2 * eps)
        an = float(analytic_grad.flat[i])
        worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
    return worst
