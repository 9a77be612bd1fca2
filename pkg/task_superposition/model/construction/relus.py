"""sums of ReLUs, f(x) = sum_m c_m ReLU(a_m . [x, 1])"""

import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from ...errors import ContractError, NumericError
from ..numerics import relu

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SumOfReLUs:
    """
    coefficients c (M,) and directions a (M, k + 1), the last direction entry multiplies the constant 1.
    After normalization every direction has L1 norm at most 1, the bound C is sum |c_m|.
    """
    coefficients: np.ndarray
    directions: np.ndarray
    radius: float
    knots: int

    @property
    def budget(self) -> int:
        return len(self.coefficients)

    @property
    def bound(self) -> float:
        return float(np.sum(np.abs(self.coefficients)))

    def is_normalized(self, tolerance: float = 1e-12) -> bool:
        return bool(np.all(np.sum(np.abs(self.directions), axis=1) <= 1.0 + tolerance))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        pre = x[..., None] * self.directions[:, 0] + self.directions[:, -1]
        return relu(pre) @ self.coefficients


def fit_sum_of_relus(g: Callable[[float], float], R: float, M: int) -> SumOfReLUs:
    """
    Piecewise-linear interpolant of g on uniform knots over [-R, R], written as
        g(-R) ReLU(1) + s_0 ReLU(x + R) + sum_k (s_k - s_{k-1}) ReLU(x - x_k)
    with each direction rescaled to unit L1 norm. An even budget uses M - 1 knots,
    so that 0 is always a knot and |x| is represented exactly.
    """
    if M < 3:
        raise ContractError(f'need at least 3 knots, got {M}')
    if R <= 0:
        raise ContractError(f'radius must be positive, got {R}')

    n_knots = M if M % 2 == 1 else M - 1
    knots = np.linspace(-R, R, n_knots)
    knots[n_knots // 2] = 0.0

    values = np.array([g(float(k)) for k in knots], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        bad = knots[~np.isfinite(values)][0]
        raise NumericError(f'g is not finite at x={bad}')

    slopes = np.diff(values) / np.diff(knots)

    coefficients = [values[0], slopes[0]]
    directions = [(0.0, 1.0), (1.0, R)]
    for k in range(1, n_knots - 1):
        coefficients.append(slopes[k] - slopes[k - 1])
        directions.append((1.0, -knots[k]))

    c = np.array(coefficients)
    a = np.array(directions)
    norms = np.sum(np.abs(a), axis=1)
    a = a / norms[:, None]
    c = c * norms

    keep = c != 0.0
    if not np.any(keep):
        keep[0] = True
    result = SumOfReLUs(coefficients=c[keep], directions=a[keep], radius=float(R), knots=n_knots)
    logger.debug('fitted %d relu terms on %d knots, bound C=%.6g', result.budget, n_knots, result.bound)
    return result


def interpolation_error_bound(R: float, M: int, second_derivative_bound: float) -> float:
    """h^2 max|g''| / 8 for the knot spacing h that fit_sum_of_relus uses with budget M"""
    n_knots = M if M % 2 == 1 else M - 1
    h = 2 * R / (n_knots - 1)
    return h * h * second_derivative_bound / 8
