import csv
import json
import math

import numpy as np
import pytest
from pydantic import ValidationError

from task_superposition.errors import BackendError, BudgetError, CollisionError, ContractError, DomainError
from task_superposition.model.mock import PrefixTableModel
from task_superposition.model.probe import (
    ModelBackend, OutputDistribution, PromptMetrics, TaskDistribution, answer_probability, enumerate_outputs,
    evaluate_prompt, kl_divergence, metric_report, named_distribution, percentile_summary, restrict_to_support,
    task_output_distribution, top_k_coverage,
)
from task_superposition.model.taskgen import (
    SEPARATOR, VOCAB, TaskSpec, make_mixture_prompt, make_zero_shot_prompt, task_by_name,
)
from task_superposition.util import derive_rng

RETRIEVAL = [task_by_name(f'ret{i}') for i in range(1, 7)]


@pytest.fixture
def chain_model():
    model = PrefixTableModel(['a', 'b', 'c'])
    model.set('', {'a': 0.5, 'b': 0.5})
    model.set('a', {'b': 0.4, 'c': 0.6})
    model.set('b', {'c': 1.0})
    return model


def answer_model(prompt, probabilities):
    """prefix table whose separator-terminated answers to the prompt's tasks have the given probabilities"""
    answers = {task.answer(prompt.query) + SEPARATOR: p for task, p in zip(RETRIEVAL, probabilities)}
    return PrefixTableModel.from_answers(VOCAB.symbols, prompt.text, answers, filler='@')


@pytest.fixture
def prompt():
    return make_mixture_prompt(RETRIEVAL, named_distribution('D1'), 12, derive_rng(7))


def test_answer_probability_is_the_chain_product(chain_model):
    assert answer_probability(chain_model, [], chain_model.encode('ab')) == pytest.approx(0.2, abs=1e-15)
    assert answer_probability(chain_model, [], chain_model.encode('b')) == 0.5


def test_answer_probability_stops_at_zero(chain_model):
    assert answer_probability(chain_model, [], chain_model.encode('cb')) == 0.0


def test_answer_probability_errors(chain_model):
    with pytest.raises(ContractError):
        answer_probability(chain_model, [], [])
    with pytest.raises(BackendError) as info:
        answer_probability(chain_model, [], chain_model.encode('aca'))
    assert info.value.index == 2


def test_model_backend_matches_transformer(tiny_weights, tiny_config):
    backend = ModelBackend(tiny_weights, tiny_config)
    tokens = backend.encode('ab>c')
    dist = backend.next_token_distribution(tokens)
    assert dist.shape == (len(VOCAB),)
    assert dist.sum() == pytest.approx(1.0, abs=1e-12)
    p = answer_probability(backend, tokens[:2], tokens[2:])
    expected = backend.next_token_distribution(tokens[:2])[tokens[2]] * backend.next_token_distribution(tokens[:3])[tokens[3]]
    assert p == pytest.approx(expected, rel=1e-12)


def test_task_output_distribution(prompt):
    probabilities = [0.3, 0.2, 0.1, 0.1, 0.05, 0.05]
    P = task_output_distribution(answer_model(prompt, probabilities), prompt, RETRIEVAL, prompt_id='3')
    assert P.prompt_id == '3'
    assert P.tasks == [t.name for t in RETRIEVAL]
    np.testing.assert_allclose(P.probabilities, probabilities, atol=1e-12)
    assert P.other == pytest.approx(0.2, abs=1e-12)


def test_collisions_are_rejected(prompt):
    same = [TaskSpec(name, 'custom', lambda rng: 'ab', lambda q: 'z') for name in ('left', 'right')]
    model = PrefixTableModel(VOCAB.symbols, default={'@': 1.0})
    with pytest.raises(CollisionError) as info:
        task_output_distribution(model, prompt, same)
    assert info.value.answer == 'z'
    assert info.value.tasks == ['left', 'right']


@pytest.mark.parametrize('probabilities, expected', [
    ([0.16] * 6, 6),
    ([0.5, 0, 0, 0, 0, 0], 1),
    ([0.3, 0.3, 0.1, 0, 0, 0], 3),
    ([0.01] * 6, 5),
])
def test_top_k_coverage(prompt, probabilities, expected):
    model = answer_model(prompt, probabilities)
    P = task_output_distribution(model, prompt, RETRIEVAL)
    assert top_k_coverage(P, model, prompt) == expected


def test_enumeration_order_and_budget(chain_model):
    candidates = enumerate_outputs(chain_model, [], 2, beam_width=2)
    assert [c.tokens for c in candidates] == [tuple(chain_model.encode('bc')), tuple(chain_model.encode('ac'))]
    assert [c.probability for c in candidates] == pytest.approx([0.5, 0.3])

    with pytest.raises(BudgetError) as info:
        enumerate_outputs(chain_model, [], 2, beam_width=2, budget=2)
    assert info.value.partial == []

    with pytest.raises(ContractError):
        enumerate_outputs(chain_model, [], 0, beam_width=2)
    with pytest.raises(ContractError):
        enumerate_outputs(chain_model, [], 1, beam_width=0)


def test_terminated_outputs_are_not_extended():
    model = PrefixTableModel(['a', 'b', '.'])
    model.set('', {'a': 0.7, 'b': 0.3})
    model.set('a', {'.': 0.6, 'b': 0.4})
    model.set('b', {'.': 1.0})
    model.set('ab', {'.': 1.0})
    (stop,) = model.encode('.')
    candidates = enumerate_outputs(model, [], 3, beam_width=4, terminator=stop)
    assert [model.decode(c.tokens) for c in candidates] == ['a.', 'b.', 'ab.']
    assert [c.probability for c in candidates] == pytest.approx([0.42, 0.3, 0.28])


def test_prefixes_of_longer_answers_are_no_outputs():
    plus2, plus6 = task_by_name('plus2'), task_by_name('plus6')
    prompt = make_zero_shot_prompt([plus2, plus6], '97', derive_rng(3))
    assert (plus2.answer('97'), plus6.answer('97')) == ('99', '103')

    model = PrefixTableModel.from_answers(VOCAB.symbols, prompt.text, {'99\n': 0.4, '103\n': 0.6}, filler='@')
    P = task_output_distribution(model, prompt, [plus2, plus6])
    np.testing.assert_allclose(P.probabilities, [0.4, 0.6], atol=1e-12)
    assert top_k_coverage(P, model, prompt) == 2
    assert top_k_coverage(P, model, prompt, K=1) == 1

    # an unfinished '10' followed by filler is an output of its own, not the answer '103'
    truncated = PrefixTableModel.from_answers(VOCAB.symbols, prompt.text, {'99\n': 0.4, '10': 0.6}, filler='@')
    assert top_k_coverage(task_output_distribution(truncated, prompt, [plus2, plus6]), truncated, prompt) == 1


def test_coverage_reports_partial_count(prompt):
    model = answer_model(prompt, [0.16] * 6)
    P = task_output_distribution(model, prompt, RETRIEVAL)
    with pytest.raises(BudgetError) as info:
        top_k_coverage(P, model, prompt, budget=0)
    assert info.value.partial == 0


def test_kl_two_points():
    expected = 0.8 * math.log(0.8 / 0.5) + 0.2 * math.log(0.2 / 0.5)
    assert kl_divergence([0.8, 0.2], [0.5, 0.5]) == pytest.approx(expected, abs=1e-12)
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)


def test_kl_is_nonnegative(rng):
    for _ in range(1000):
        K = int(rng.integers(2, 8))
        P = rng.dirichlet(np.ones(K)) * rng.uniform(0.1, 1.0)
        D = rng.dirichlet(np.ones(K))
        assert kl_divergence(P, D) >= 0.0


def test_restriction_to_support():
    restriction = restrict_to_support([0.3, 0.3, 0.4], [0.5, 0.5, 0.0])
    np.testing.assert_allclose(restriction.p_hat, [0.5, 0.5])
    np.testing.assert_allclose(restriction.d_hat, [0.5, 0.5])
    assert restriction.discarded == pytest.approx(0.4)
    assert kl_divergence([0.3, 0.3, 0.4], [0.5, 0.5, 0.0]) == pytest.approx(0.0, abs=1e-15)

    with pytest.raises(DomainError):
        restrict_to_support([0.0, 0.0, 1.0], [0.5, 0.5, 0.0])
    with pytest.raises(DomainError):
        restrict_to_support([-0.1, 1.1], [0.5, 0.5])
    with pytest.raises(ContractError):
        restrict_to_support([0.5, 0.5], [1.0])


def test_named_distributions():
    assert named_distribution('D1') == pytest.approx([1 / 6] * 6)
    assert named_distribution('D2') == pytest.approx([0.1, 0.1, 0.5, 0.1, 0.1, 0.1])
    assert named_distribution('D3') == pytest.approx([0.25, 1 / 12] * 3)
    assert named_distribution('D1', 4) == pytest.approx([0.25] * 4)
    for name in ('D1', 'D2', 'D3'):
        assert math.fsum(named_distribution(name)) == pytest.approx(1.0, abs=1e-12)

    with pytest.raises(ContractError):
        named_distribution('D2', 2)
    with pytest.raises(ContractError):
        named_distribution('D3', 5)
    with pytest.raises(ValidationError):
        named_distribution('D4')


def test_distribution_models_validate():
    TaskDistribution(tasks=['a', 'b'], probabilities=[0.25, 0.75])
    with pytest.raises(ValidationError):
        TaskDistribution(tasks=['a', 'b'], probabilities=[0.5, 0.6])
    with pytest.raises(ValidationError):
        TaskDistribution(tasks=['a'], probabilities=[0.5, 0.5])
    with pytest.raises(ValidationError):
        OutputDistribution(prompt_id='0', tasks=['a'], answers=['x'], probabilities=[0.5], other=0.2)


def test_percentile_summary():
    summary = percentile_summary([1, 2, 3, 4, 5])
    assert summary == {'mean': 3.0, 'p0': 1.0, 'p25': 2.0, 'p50': 3.0, 'p75': 4.0, 'p100': 5.0}
    with pytest.raises(ContractError):
        percentile_summary([])


def test_metric_report(tmp_path):
    prompts = [make_mixture_prompt(RETRIEVAL, named_distribution('D1'), 12, derive_rng(8, i)) for i in range(3)]
    rows: list[PromptMetrics] = []
    for i, p in enumerate(prompts):
        model = answer_model(p, [0.16] * 6)
        rows.append(evaluate_prompt(model, p, RETRIEVAL, named_distribution('D1'), prompt_id=str(i)))
    assert all(row.r == 6 for row in rows)
    assert all(row.kl == pytest.approx(0.0, abs=1e-12) for row in rows)

    summary = metric_report(rows, tmp_path / 'metrics.csv', tmp_path / 'summary.json')
    with open(tmp_path / 'metrics.csv', encoding='utf-8') as f:
        table = list(csv.reader(f))
    assert table[0] == ['prompt_id', *(f'p_ret{i}' for i in range(1, 7)), 'other', 'r', 'kl', 'discarded']
    assert [line[0] for line in table[1:]] == ['0', '1', '2']
    assert summary['n'] == 3
    assert summary['r']['p50'] == 6.0
    assert json.loads((tmp_path / 'summary.json').read_text(encoding='utf-8')) == summary

    with pytest.raises(ContractError):
        metric_report([], tmp_path / 'a.csv', tmp_path / 'b.json')
