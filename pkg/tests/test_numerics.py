import numpy as np
import pytest

from task_superposition.errors import DimensionError, NumericError, TargetIndexError
from task_superposition.model.numerics import (
    cross_entropy, finite_diff_check, log_softmax, matmul, relu, row_softmax,
)


def test_row_softmax_is_stable_for_large_logits():
    x = np.array([[1000.0, 1000.0, -1000.0], [0.0, 0.0, 0.0]])
    p = row_softmax(x)
    assert np.allclose(p[0], [0.5, 0.5, 0.0])
    assert np.allclose(p[1], [1 / 3] * 3)
    assert np.allclose(p.sum(axis=-1), 1.0)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(4, 7))
    assert np.allclose(log_softmax(x), np.log(row_softmax(x)))


def test_relu():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.5])), [0.0, 0.0, 2.5])


def test_matmul_rejects_mismatching_shapes():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert matmul(np.eye(2), np.ones((2, 3))).shape == (2, 3)


def test_cross_entropy_gradient_matches_finite_differences(rng):
    logits = rng.normal(size=6)
    loss, grad = cross_entropy(logits, 2)
    assert loss == pytest.approx(-np.log(row_softmax(logits)[2]))
    error = finite_diff_check(lambda z: cross_entropy(z, 2)[0], logits, grad)
    assert error < 1e-8


@pytest.mark.parametrize('target', [-1, 6])
def test_cross_entropy_rejects_targets_out_of_range(target):
    with pytest.raises(TargetIndexError):
        cross_entropy(np.zeros(6), target)


def test_cross_entropy_needs_a_vector():
    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 3)), 0)


def test_finite_diff_check_detects_wrong_gradients():
    x = np.array([1.0, -2.0, 0.5])
    assert finite_diff_check(lambda z: float(np.sum(z ** 2)), x, 2 * x) < 1e-8
    assert finite_diff_check(lambda z: float(np.sum(z ** 2)), x, 3 * x) > 0.1


def test_finite_diff_check_reports_non_finite_evaluations():
    with pytest.raises(NumericError):
        finite_diff_check(lambda z: float('nan'), np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        finite_diff_check(lambda z: 0.0, np.zeros(2), np.zeros(2), eps=0.0)


@pytest.mark.parametrize('x', [
    np.array([[1000.0, 0.0]]),
    np.array([[-1000.0, 1000.0, 0.0], [1e-3, 2e-3, 3e-3]]),
    np.linspace(-50.0, 50.0, 24).reshape(4, 6),
])
def test_softmax_rows_sum_to_one(x):
    assert np.all(np.abs(row_softmax(x).sum(axis=-1) - 1.0) <= 1e-12)


@pytest.mark.parametrize('V', [2, 7, 50])
def test_cross_entropy_of_uniform_logits(V):
    loss, grad = cross_entropy(np.full(V, 3.0), V - 1)
    assert loss == pytest.approx(np.log(V), abs=1e-12)
    assert abs(grad.sum()) <= 1e-12


def test_cross_entropy_known_value():
    loss, grad = cross_entropy(np.array([1.0, 2.0, 3.0]), 1)
    assert loss == pytest.approx(np.log(np.e + np.e ** 2 + np.e ** 3) - 2.0, abs=1e-12)
    assert abs(grad.sum()) <= 1e-12
    assert grad[1] < 0 < grad[0] < grad[2]


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_kernel_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)

    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(3, 5))
    p = row_softmax(x)
    grad = p * (w - np.sum(w * p, axis=-1, keepdims=True))
    assert finite_diff_check(lambda z: float(np.sum(w * row_softmax(z))), x, grad) < 1e-8

    # keep every coordinate away from the kink at 0
    y = rng.choice([-1.0, 1.0], size=8) * rng.uniform(0.1, 2.0, size=8)
    v = rng.normal(size=8)
    assert finite_diff_check(lambda z: float(np.sum(v * relu(z))), y, v * (y > 0)) < 1e-8

    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    u = rng.normal(size=(3, 2))
    assert finite_diff_check(lambda z: float(np.sum(u * matmul(z, b))), a, u @ b.T) < 1e-8
    assert finite_diff_check(lambda z: float(np.sum(u * matmul(a, z))), b, a.T @ u) < 1e-8


@pytest.mark.parametrize('shape', [(1, 1, 1), (2, 3, 4), (5, 1, 3)])
def test_matmul_matches_the_naive_product(rng, shape):
    m, k, n = shape
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    expected = np.array([[sum(a[i, l] * b[l, j] for l in range(k)) for j in range(n)] for i in range(m)])
    np.testing.assert_allclose(matmul(a, b), expected, rtol=0, atol=1e-12)
