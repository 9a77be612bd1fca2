"""
answer probabilities, per-task output distributions and the coverage/KL metrics

The probability of a multi-token answer u_1 .. u_N given a prompt is the chain
P(u_1 | prompt) * P(u_2 | prompt u_1) * ... * P(u_N | prompt u_1 .. u_N-1).
Any object with `encode(text)` and `next_token_distribution(tokens)` serves as backend:
a transformer with optional patches (ModelBackend) or a PrefixTableModel.
"""

import csv
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Protocol

import numpy as np
from pydantic import Field, model_validator, validate_call

from ..errors import BackendError, BudgetError, CollisionError, ContractError, DomainError
from . import transformer
from .taskgen import SEPARATOR, VOCAB, MixturePrompt, TaskSpec, Vocab
from .validation import StrictBaseModel

logger = logging.getLogger(__name__)

PERCENTILES = (0, 25, 50, 75, 100)


class Backend(Protocol):
    def encode(self, text: str) -> list[int]: ...

    def next_token_distribution(self, tokens: Sequence[int]) -> np.ndarray: ...


@dataclass
class ModelBackend:
    """a transformer as next-token provider, patches stay at their absolute positions"""
    weights: transformer.TransformerWeights
    config: transformer.TransformerConfig
    patches: tuple[transformer.PatchDirective, ...] = ()
    vocab: Vocab = field(default=VOCAB, repr=False)

    def encode(self, text: str) -> list[int]:
        return self.vocab.encode(text)

    def next_token_distribution(self, tokens: Sequence[int]) -> np.ndarray:
        return transformer.next_token_distribution(self.weights, self.config, list(tokens), self.patches)


"""
pydantic models for validation
"""

class TaskDistribution(StrictBaseModel):
    tasks: list[str]
    probabilities: list[float] = Field(min_length=1)

    @model_validator(mode='after')
    def check_probability_vector(self):
        if len(self.tasks) != len(self.probabilities):
            raise ValueError(f'{len(self.tasks)} tasks but {len(self.probabilities)} probabilities')
        if any(p < 0 for p in self.probabilities):
            raise ValueError('task probabilities must be nonnegative')
        if abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValueError(f'task probabilities sum to {sum(self.probabilities)}, not 1')
        return self


class OutputDistribution(StrictBaseModel):
    prompt_id: str
    tasks: list[str]
    answers: list[str]
    probabilities: list[float]
    other: float = Field(ge=0.0, le=1.0)

    @model_validator(mode='after')
    def check_closure(self):
        if not len(self.tasks) == len(self.answers) == len(self.probabilities):
            raise ValueError('tasks, answers and probabilities must have the same length')
        if any(not 0.0 <= p <= 1.0 for p in self.probabilities):
            raise ValueError('answer probabilities must lie in [0, 1]')
        if abs(sum(self.probabilities) + self.other - 1.0) > 1e-6:
            raise ValueError(f'probabilities and other sum to {sum(self.probabilities) + self.other}, not 1')
        return self

    def vector(self) -> np.ndarray:
        return np.array(self.probabilities)


"""
probability operations
"""

def answer_probability(backend: Backend, prompt_tokens: Sequence[int], answer_tokens: Sequence[int]) -> float:
    if len(answer_tokens) == 0:
        raise ContractError('cannot score an empty answer')

    context = list(prompt_tokens)
    probability = 1.0
    for index, token in enumerate(answer_tokens):
        try:
            dist = backend.next_token_distribution(context)
        except BackendError as e:
            raise BackendError(index, e.reason) from e
        except Exception as e:
            raise BackendError(index, f'{type(e).__name__}: {e}') from e
        probability *= float(dist[token])
        if probability == 0.0:
            return 0.0
        context.append(int(token))
    return probability


def _check_collisions(tasks: Sequence[TaskSpec], answers: Sequence[str]) -> None:
    owners: dict[str, list[str]] = {}
    for task, answer in zip(tasks, answers):
        owners.setdefault(answer, []).append(task.name)
    for answer, names in owners.items():
        if len(names) > 1:
            raise CollisionError(answer, names)


def task_output_distribution(
        backend: Backend, prompt: MixturePrompt, tasks: Sequence[TaskSpec], prompt_id: str = '0',
        ) -> OutputDistribution:
    answers = [task.answer(prompt.query) for task in tasks]
    _check_collisions(tasks, answers)

    prompt_tokens = backend.encode(prompt.text)
    probabilities = [answer_probability(backend, prompt_tokens, backend.encode(a)) for a in answers]
    total = math.fsum(probabilities)
    if total > 1.0:
        logger.warning('task answer probabilities of prompt %s sum to %s, flooring other at 0', prompt_id, total)
    return OutputDistribution(
        prompt_id=prompt_id,
        tasks=[task.name for task in tasks],
        answers=answers,
        probabilities=probabilities,
        other=max(0.0, 1.0 - total),
    )


"""
metrics
"""

@dataclass(frozen=True)
class Candidate:
    tokens: tuple[int, ...]
    probability: float


def enumerate_outputs(
        backend: Backend,
        prompt_tokens: Sequence[int],
        max_length: int,
        beam_width: int,
        terminator: int | None = None,
        budget: int = 10_000,
        ) -> list[Candidate]:
    """
    Beam search over continuations of at most max_length tokens, keeping the beam_width most probable
    sequences at every step. A sequence ending in the terminator is a complete output and is not extended
    further; the sequences still open after max_length steps are outputs as well.
    Returns the outputs, most probable first (ties by token ids). Zero-probability continuations never appear.
    """
    if max_length < 1:
        raise ContractError(f'candidate length must be positive, got {max_length}')
    if beam_width < 1:
        raise ContractError(f'beam width must be at least 1, got {beam_width}')

    def ranked(candidates: list[Candidate]) -> list[Candidate]:
        return sorted(candidates, key=lambda c: (-c.probability, c.tokens))

    beams = [Candidate((), 1.0)]
    finished: list[Candidate] = []
    calls = 0
    for _ in range(max_length):
        expanded: list[Candidate] = []
        for beam in beams:
            calls += 1
            if calls > budget:
                raise BudgetError(f'beam enumeration exceeded {budget} backend calls', partial=ranked(finished))
            dist = backend.next_token_distribution(list(prompt_tokens) + list(beam.tokens))
            for token in np.flatnonzero(dist > 0):
                expanded.append(Candidate(beam.tokens + (int(token),), beam.probability * float(dist[token])))
        selected = ranked(expanded)[:beam_width]
        finished += [c for c in selected if terminator is not None and c.tokens[-1] == terminator]
        beams = [c for c in selected if terminator is None or c.tokens[-1] != terminator]
        if not beams:
            break
    return ranked(finished + beams)


def top_k_coverage(
        P: OutputDistribution,
        backend: Backend,
        prompt: MixturePrompt,
        K: int | None = None,
        beam_width: int | None = None,
        budget: int = 10_000,
        ) -> int:
    """
    Number of task answers among the K most probable complete outputs. An output is complete when it
    ends in the example separator, so a prefix of a longer answer never counts as an answer.
    """
    K = len(P.tasks) if K is None else K
    if K < 1:
        raise ContractError(f'K must be at least 1, got {K}')
    (separator,) = backend.encode(SEPARATOR)
    answers = {tuple(backend.encode(a)) + (separator,) for a in P.answers}

    def count(candidates: list[Candidate]) -> int:
        return sum(1 for c in candidates[:K] if c.tokens in answers)

    try:
        candidates = enumerate_outputs(
            backend, backend.encode(prompt.text), max(len(a) for a in answers), beam_width or 4 * K,
            separator, budget,
        )
    except BudgetError as e:
        raise BudgetError(str(e), partial=count(e.partial)) from e
    return count(candidates)


@dataclass(frozen=True)
class Restriction:
    p_hat: np.ndarray
    d_hat: np.ndarray
    discarded: float


def restrict_to_support(P: Sequence[float] | OutputDistribution, D: Sequence[float] | TaskDistribution) -> Restriction:
    """drop the tasks with D_i = 0 and renormalize P over the rest, reporting the dropped mass"""
    p = P.vector() if isinstance(P, OutputDistribution) else np.asarray(P, dtype=np.float64)
    d = np.array(D.probabilities) if isinstance(D, TaskDistribution) else np.asarray(D, dtype=np.float64)
    if p.shape != d.shape:
        raise ContractError(f'P over {p.shape[0]} tasks but D over {d.shape[0]}')
    if np.any(p < 0) or np.any(d < 0):
        raise DomainError('distributions must be nonnegative')

    support = d > 0
    mass = float(np.sum(p[support]))
    if mass <= 0.0:
        raise DomainError('P has no mass on the support of D')
    p_hat = p[support] / mass
    d_hat = d[support] / np.sum(d[support])
    return Restriction(p_hat, d_hat, max(0.0, 1.0 - mass))


def kl_divergence(P: Sequence[float] | OutputDistribution, D: Sequence[float] | TaskDistribution) -> float:
    """KL(P_hat || D) in nats with 0 ln 0 = 0, P_hat being P restricted to the support of D"""
    restriction = restrict_to_support(P, D)
    p, d = restriction.p_hat, restriction.d_hat
    if np.any((p > 0) & (d == 0)):
        raise DomainError('P_hat has mass where D is zero')
    nonzero = p > 0
    value = math.fsum(p[nonzero] * (np.log(p[nonzero]) - np.log(d[nonzero])))
    return max(0.0, value)


@validate_call
def named_distribution(name: Literal['D1', 'D2', 'D3'], K: int = Field(default=6, ge=1)) -> list[float]:
    """
    D1: uniform. D2: 0.5 on the third task, the rest shared equally.
    D3: alternating 3/(2K) and 1/(2K), i.e. 1/4 and 1/12 for K = 6.
    """
    match name:
        case 'D1':
            return [1.0 / K] * K
        case 'D2':
            if K < 3:
                raise ContractError(f'D2 needs at least 3 tasks, got {K}')
            return [0.5 if i == 2 else 0.5 / (K - 1) for i in range(K)]
        case 'D3':
            if K % 2:
                raise ContractError(f'D3 needs an even number of tasks, got {K}')
            return [3.0 / (2 * K) if i % 2 == 0 else 1.0 / (2 * K) for i in range(K)]


"""
reports
"""

@dataclass
class PromptMetrics:
    distribution: OutputDistribution
    r: int
    kl: float
    discarded: float


def evaluate_prompt(
        backend: Backend,
        prompt: MixturePrompt,
        tasks: Sequence[TaskSpec],
        D: Sequence[float],
        prompt_id: str,
        beam_width: int | None = None,
        ) -> PromptMetrics:
    P = task_output_distribution(backend, prompt, tasks, prompt_id)
    restriction = restrict_to_support(P, D)
    return PromptMetrics(
        distribution=P,
        r=top_k_coverage(P, backend, prompt, beam_width=beam_width),
        kl=kl_divergence(P, D),
        discarded=restriction.discarded,
    )


def percentile_summary(values: Sequence[float]) -> dict[str, float]:
    """mean and the 0/25/50/75/100 percentile band"""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise ContractError('cannot summarize an empty sample')
    summary = {'mean': float(np.mean(array))}
    for q, v in zip(PERCENTILES, np.percentile(array, PERCENTILES)):
        summary[f'p{q}'] = float(v)
    return summary


def metric_report(rows: Sequence[PromptMetrics], csv_path: Path, json_path: Path) -> dict[str, object]:
    """per-prompt csv and a json summary of every column"""
    if not rows:
        raise ContractError('no prompts to report')
    tasks = rows[0].distribution.tasks

    with open(csv_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['prompt_id', *(f'p_{t}' for t in tasks), 'other', 'r', 'kl', 'discarded'])
        for row in rows:
            P = row.distribution
            writer.writerow([P.prompt_id, *map(repr, P.probabilities), repr(P.other), row.r, repr(row.kl), repr(row.discarded)])

    summary: dict[str, object] = {'n': len(rows), 'tasks': tasks}
    for i, task in enumerate(tasks):
        summary[f'p_{task}'] = percentile_summary([row.distribution.probabilities[i] for row in rows])
    summary['other'] = percentile_summary([row.distribution.other for row in rows])
    summary['r'] = percentile_summary([row.r for row in rows])
    summary['kl'] = percentile_summary([row.kl for row in rows])
    summary['discarded'] = percentile_summary([row.discarded for row in rows])
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info('wrote metrics of %d prompts to %s', len(rows), csv_path)
    return summary
