import warnings

import numpy as np
import pytest

from task_superposition import events
from task_superposition.errors import ContractError, DegeneracyError, LayerMismatchError, SequenceLengthError
from task_superposition.model.probe import ModelBackend
from task_superposition.model.taskgen import make_mixture_prompt, task_by_name
from task_superposition.model.training import aggregate_point, evaluate_accuracy, lambda_grid
from task_superposition.model.taskvec import (
    LayerScan, TaskVector, interpolate, lda_axes, lda_project, load_task_vector, mixture_task_vector,
    patched_backend, patched_coverage, patched_distributions, patched_mixture_curve, prompt_features,
    save_task_vector, scan_layers, select_common_task_vectors, select_task_vector, zero_shot_queries,
)
from task_superposition.util import derive_rng, draw_base_seed

RET2, RET6 = task_by_name('ret2'), task_by_name('ret6')


@pytest.fixture
def pair(rng):
    return TaskVector('ret2', 1, rng.normal(size=8), 0.75), TaskVector('ret6', 1, rng.normal(size=8), 0.5)


def test_interpolation_endpoints(pair):
    v1, v2 = pair
    np.testing.assert_array_equal(interpolate(v1, v2, 1.0), v1.vector)
    np.testing.assert_array_equal(interpolate(v1, v2, 0.0), v2.vector)


def test_interpolation_stays_between(pair, rng):
    v1, v2 = pair
    v2.vector[:3] = v1.vector[:3]
    for lam in rng.uniform(0.0, 1.0, size=50):
        mixed = interpolate(v1, v2, lam)
        assert np.all(mixed >= np.minimum(v1.vector, v2.vector))
        assert np.all(mixed <= np.maximum(v1.vector, v2.vector))
        np.testing.assert_array_equal(mixed[:3], v1.vector[:3])
        np.testing.assert_allclose(mixed, lam * v1.vector + (1 - lam) * v2.vector, atol=1e-15)


def test_interpolation_errors(pair):
    v1, v2 = pair
    with pytest.raises(LayerMismatchError):
        interpolate(v1, TaskVector('ret6', 2, v2.vector, 0.5), 0.5)
    with pytest.raises(ContractError):
        interpolate(v1, v2, 1.5)
    with pytest.raises(ContractError):
        interpolate(v1, TaskVector('ret6', 1, np.zeros(3), 0.5), 0.5)


def test_task_vector_checks():
    with pytest.raises(ContractError):
        TaskVector('ret1', 0, np.array([np.nan, 1.0]), 0.5)
    with pytest.raises(ContractError):
        TaskVector('ret1', 0, np.zeros(2), 1.5)
    with pytest.raises(ContractError):
        LayerScan('ret1', np.zeros((2, 4)), [0.5])


def test_selection_prefers_the_lowest_best_layer():
    scan = LayerScan('ret1', np.arange(12.0).reshape(3, 4), [0.25, 0.75, 0.75])
    vector = select_task_vector(scan)
    assert vector.layer == 1
    assert vector.accuracy == 0.75
    np.testing.assert_array_equal(vector.vector, [4.0, 5.0, 6.0, 7.0])


def test_common_layer():
    vectors = np.arange(12.0).reshape(3, 4)
    agree = select_common_task_vectors(LayerScan('a', vectors, [0.1, 0.9, 0.2]), LayerScan('b', vectors, [0.3, 0.8, 0.1]))
    assert [v.layer for v in agree] == [1, 1]

    a, b = select_common_task_vectors(
        LayerScan('a', vectors, [0.6, 0.1, 0.5]), LayerScan('b', vectors, [0.1, 0.2, 0.7]),
    )
    assert a.layer == b.layer == 2
    assert (a.accuracy, b.accuracy) == (0.5, 0.7)

    with pytest.raises(LayerMismatchError):
        select_common_task_vectors(LayerScan('a', vectors, [0.6, 0.1, 0.5]), LayerScan('b', vectors[:2], [0.1, 0.7]))


def test_lda_finds_the_separating_direction(rng):
    X = rng.normal(scale=0.1, size=(60, 3))
    X[30:, 0] += 2.0
    X[:, 1] += rng.normal(scale=1.0, size=60)
    labels = ['a'] * 30 + ['b'] * 30
    axes = lda_axes(X, labels)
    assert axes.shape == (3, 2)
    np.testing.assert_allclose(np.linalg.norm(axes, axis=0), 1.0)
    assert axes[0, 0] > 0.95
    assert axes[np.argmax(np.abs(axes[:, 1])), 1] > 0

    projected = lda_project(X, labels)
    assert projected.shape == (60, 2)
    assert projected[30:, 0].min() > projected[:30, 0].max()


def test_lda_errors(rng):
    X = rng.normal(size=(6, 3))
    with pytest.raises(ContractError):
        lda_axes(X, ['a'] * 6)
    with pytest.raises(ContractError):
        lda_axes(X, ['a'] * 5 + ['b'])
    with pytest.raises(ContractError):
        lda_axes(X[:, :1], ['a'] * 3 + ['b'] * 3)
    with pytest.raises(ContractError):
        lda_axes(X, ['a'] * 5)
    with pytest.raises(DegeneracyError):
        lda_axes(np.ones((6, 3)), ['a'] * 3 + ['b'] * 3)


def test_save_and_load(tmp_path, pair):
    v1, _ = pair
    save_task_vector(tmp_path / 'vector_ret2', v1)
    loaded = load_task_vector(tmp_path / 'vector_ret2')
    assert (loaded.task, loaded.layer, loaded.accuracy) == ('ret2', 1, 0.75)
    np.testing.assert_array_equal(loaded.vector, v1.vector)


def test_patching_a_prompts_own_feature_changes_nothing(tiny_weights, tiny_config):
    prompt = make_mixture_prompt([RET2], [1.0], 3, derive_rng(11))
    features = prompt_features(tiny_weights, tiny_config, prompt)
    assert features.shape == (tiny_config.n_layers, tiny_config.d_model)

    plain = ModelBackend(tiny_weights, tiny_config).next_token_distribution(prompt.tokens)
    for layer in range(tiny_config.n_layers):
        backend = patched_backend(tiny_weights, tiny_config, prompt, features[layer], layer)
        np.testing.assert_allclose(backend.next_token_distribution(prompt.tokens), plain, atol=1e-12)


def test_features_respect_the_context_length(tiny_weights, tiny_config):
    prompt = make_mixture_prompt([RET2], [1.0], 20, derive_rng(12))
    with pytest.raises(SequenceLengthError):
        prompt_features(tiny_weights, tiny_config, prompt)


def test_scan_and_patched_curves(tiny_weights, tiny_config):
    scanned: list[events.ProgressData] = []
    events.progress.add_handler(scanned.append)
    scan = scan_layers(tiny_weights, tiny_config, RET2, derive_rng(1), n_prompts=2, m=3)
    assert scan.vectors.shape == (tiny_config.n_layers, tiny_config.d_model)
    assert all(0.0 <= a <= 1.0 for a in scan.accuracies)
    assert [s.done for s in scanned if s.operation == 'taskvec'] == list(range(1, tiny_config.n_layers + 1))

    other = scan_layers(tiny_weights, tiny_config, RET6, derive_rng(2), n_prompts=2, m=3)
    v1, v2 = select_common_task_vectors(scan, other)
    curve = patched_mixture_curve(tiny_weights, tiny_config, v1, v2, RET2, RET6, [0.0, 0.5, 1.0], derive_rng(3), n_queries=2)
    assert curve.lambdas == [0.0, 0.5, 1.0]
    for point in curve.points:
        assert point.p_task_a + point.p_task_b + point.p_other == pytest.approx(1.0, abs=1e-6)

    coverage = patched_coverage(tiny_weights, tiny_config, v1, v2, RET2, RET6, 0.5, derive_rng(4), n_queries=2)
    assert coverage in (0.0, 0.5, 1.0)

    mixed = mixture_task_vector(tiny_weights, tiny_config, [RET2, RET6], [0.5, 0.5], v1.layer, derive_rng(5), 2, 4)
    assert mixed.shape == (tiny_config.d_model,)


def test_scan_is_reproducible(tiny_weights, tiny_config):
    first = scan_layers(tiny_weights, tiny_config, RET2, derive_rng(1), n_prompts=2, m=3)
    second = scan_layers(tiny_weights, tiny_config, RET2, derive_rng(1), n_prompts=2, m=3)
    np.testing.assert_array_equal(first.vectors, second.vectors)
    assert first.accuracies == second.accuracies


@pytest.mark.slow
def test_task_vectors_of_the_trained_retrieval_model(desk_model):
    result = desk_model('retrieval')
    weights, config = result.weights, result.config
    scans = [scan_layers(weights, config, task, derive_rng(7, 0, k), 100, 20) for k, task in enumerate((RET2, RET6))]
    v2, v6 = select_common_task_vectors(*scans)
    for k, (task, vector) in enumerate(((RET2, v2), (RET6, v6))):
        icl = evaluate_accuracy(weights, config, [task], 100, 20, derive_rng(7, 2, k))
        assert vector.accuracy >= 0.8 * icl

    grid = lambda_grid(11)
    curve = patched_mixture_curve(weights, config, v2, v6, RET2, RET6, grid, derive_rng(7, 1), 100)
    queries = zero_shot_queries([RET2, RET6], 100, draw_base_seed(derive_rng(7, 1)))
    for lam, vector, point in ((0.0, v6, curve.points[0]), (1.0, v2, curve.points[-1])):
        single = patched_distributions(weights, config, vector.vector, vector.layer, [RET2, RET6], queries)
        assert aggregate_point(lam, single) == point

    lo, hi = np.minimum(v2.vector, v6.vector), np.maximum(v2.vector, v6.vector)
    for lam in grid:
        mixed = interpolate(v2, v6, lam)
        assert np.all(lo <= mixed) and np.all(mixed <= hi)

    coverage = patched_coverage(weights, config, v2, v6, RET2, RET6, 0.5, derive_rng(7, 3), 100)
    assert 0.0 <= coverage <= 1.0
    if coverage < 0.6:
        warnings.warn(f'both answers among the top-2 outputs for only {coverage:.0%} of the queries at lambda 0.5')
