"""
in-context learning objective, training loop and the mixture ratio sweep

Every training sequence holds m examples of one task. Task and m are drawn anew for each sequence of a batch,
m uniformly from [m_min, m_max]; held-out evaluation uses its own, usually longer, eval_m.
The loss is the mean cross-entropy over the answer tokens of examples 2..m, i.e. on answers the
model could infer from the preceding examples.
"""

import csv
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import Field, model_validator

from .. import events
from ..config import TrainConfig
from ..errors import ContractError, TrainingDivergedError
from ..util import derive_rng, draw_base_seed
from . import probe
from .numerics import log_softmax
from .taskgen import VOCAB, ICLSequence, TaskSpec, Vocab, make_icl_sequence, make_mixture_prompt, task_family
from .transformer import (
    PositionalMode, TransformerConfig, TransformerWeights, backward, forward, greedy_decode, init_weights,
)
from .validation import StrictBaseModel

logger = logging.getLogger(__name__)


def icl_loss(weights: TransformerWeights, config: TransformerConfig, sequence: ICLSequence) -> float:
    """mean cross-entropy over the masked answer tokens"""
    targets = sequence.targets()
    scored = targets >= 0
    if not np.any(scored):
        raise ContractError(f'sequence of task {sequence.task} has no masked answer tokens')
    logits, _ = forward(weights, config, sequence.tokens)
    log_probs = log_softmax(logits)
    picked = log_probs[np.flatnonzero(scored), targets[scored]]
    return float(-np.mean(picked))


def collate(
        sequences: Sequence[ICLSequence], max_seq_len: int, rng: np.random.Generator, pad_id: int = 0,
        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Right-pad a batch to (B, T) token, target and position arrays. Every sequence starts at a random
    position offset, so all positional rows up to max_seq_len see training signal.
    """
    T = max(len(s.tokens) for s in sequences)
    if T > max_seq_len:
        raise ContractError(f'training sequence of length {T} exceeds max_seq_len={max_seq_len}')

    tokens = np.full((len(sequences), T), pad_id, dtype=np.int64)
    targets = np.full((len(sequences), T), -1, dtype=np.int64)
    positions = np.zeros((len(sequences), T), dtype=np.int64)
    for b, sequence in enumerate(sequences):
        n = len(sequence.tokens)
        offset = int(rng.integers(0, max_seq_len - n + 1))
        tokens[b, :n] = sequence.tokens
        targets[b, :n] = sequence.targets()
        positions[b] = np.minimum(offset + np.arange(T), max_seq_len - 1)
    return tokens, targets, positions


class Adam:
    """adaptive moment estimation without learning rate schedule"""

    def __init__(self, like: TransformerWeights, learning_rate: float, beta1: float, beta2: float, epsilon: float) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self._m = like.map(np.zeros_like)
        self._v = like.map(np.zeros_like)

    def step(self, weights: TransformerWeights, grads: TransformerWeights) -> None:
        """update weights in place"""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        params, g, m, v = weights.arrays(), grads.arrays(), self._m.arrays(), self._v.arrays()
        for name in TransformerWeights.names():
            m[name] *= self.beta1
            m[name] += (1.0 - self.beta1) * g[name]
            v[name] *= self.beta2
            v[name] += (1.0 - self.beta2) * g[name] ** 2
            params[name] -= self.learning_rate * (m[name] / correction1) / (np.sqrt(v[name] / correction2) + self.epsilon)


def batch_gradients(
        weights: TransformerWeights,
        config: TransformerConfig,
        tokens: np.ndarray,
        targets: np.ndarray,
        positions: np.ndarray,
        workers: int = 1,
        executor: ThreadPoolExecutor | None = None,
        ) -> tuple[TransformerWeights, float]:
    """
    Gradient of the mean loss over all targets of the batch. With several workers the batch is split
    into contiguous chunks, whose gradients are summed in chunk order weighted by their target counts.
    """
    if workers <= 1 or executor is None or len(tokens) < 2:
        return backward(weights, config, tokens, targets, positions)

    chunks = [c for c in np.array_split(np.arange(len(tokens)), workers) if len(c)]
    counts = [int(np.sum(targets[c] >= 0)) for c in chunks]
    results = list(executor.map(lambda c: backward(weights, config, tokens[c], targets[c], positions[c]), chunks))

    total = sum(counts)
    grads = results[0][0].map(lambda a: a * (counts[0] / total))
    loss = results[0][1] * counts[0] / total
    for (g, chunk_loss), count in zip(results[1:], counts[1:]):
        acc, part = grads.arrays(), g.arrays()
        for name in TransformerWeights.names():
            acc[name] += part[name] * (count / total)
        loss += chunk_loss * count / total
    return grads, loss


@dataclass
class LossRecord:
    step: int
    loss: float
    tokens: int  # number of scored answer tokens in the batch


@dataclass
class TrainResult:
    config: TransformerConfig
    weights: TransformerWeights
    losses: list[LossRecord] = field(default_factory=list)
    accuracy: float | None = None


def desk_model_config(config: TrainConfig, vocab: Vocab = VOCAB) -> TransformerConfig:
    return TransformerConfig(
        n_layers=config.n_layers,
        n_heads=config.n_heads,
        d_model=config.d_model,
        d_mlp=config.d_mlp,
        vocab_size=len(vocab),
        max_seq_len=config.max_seq_len,
        positional_mode=PositionalMode.LEARNED,
    )


def sample_batch(
        tasks: Sequence[TaskSpec], batch_size: int, m_min: int, m_max: int, rng: np.random.Generator,
        ) -> list[ICLSequence]:
    """one task and one example count m ~ U{m_min .. m_max} per sequence"""
    if not 2 <= m_min <= m_max:
        raise ContractError(f'need 2 <= m_min <= m_max, got [{m_min}, {m_max}]')
    sequences = []
    for _ in range(batch_size):
        task = tasks[int(rng.integers(len(tasks)))]
        m = int(rng.integers(m_min, m_max + 1))
        sequences.append(make_icl_sequence(task, m, rng))
    return sequences


def train(config: TrainConfig, evaluate: bool = True) -> TrainResult:
    """
    Adam on freshly sampled batches. The stream of step s is derived from (seed, s) alone,
    so a run is reproducible bitwise for a fixed worker count.
    """
    model_config = desk_model_config(config)
    weights = init_weights(model_config, derive_rng(config.seed, 0))
    optimizer = Adam(weights, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    tasks = task_family(config.family)
    result = TrainResult(model_config, weights)

    logger.info('training %s for %d steps (seed %d)', config.family, config.steps, config.seed)
    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        for step in range(1, config.steps + 1):
            batch_seed = (config.seed, step)
            rng = derive_rng(*batch_seed)
            sequences = sample_batch(tasks, config.batch_size, config.m_min, config.m_max, rng)
            tokens, targets, positions = collate(sequences, config.max_seq_len, rng)
            grads, loss = batch_gradients(weights, model_config, tokens, targets, positions, config.workers, executor)
            if not math.isfinite(loss):
                logger.error('training diverged at step %d (batch seed %s)', step, batch_seed)
                raise TrainingDivergedError(step, batch_seed, loss)

            optimizer.step(weights, grads)
            result.losses.append(LossRecord(step, loss, int(np.sum(targets >= 0))))
            events.training_step.emit(events.ProgressData('train', step, config.steps, loss))
            if step % config.eval_every == 0:
                recent = [r.loss for r in result.losses[-config.eval_every:]]
                logger.info('step %d: mean loss %.5f over the last %d steps', step, float(np.mean(recent)), len(recent))

    if evaluate:
        result.accuracy = evaluate_accuracy(
            weights, model_config, tasks, config.eval_prompts, config.eval_m, derive_rng(config.seed, config.steps + 1),
        )
        logger.info('held-out accuracy %.4f', result.accuracy)
    return result


def evaluate_accuracy(
        weights: TransformerWeights,
        config: TransformerConfig,
        tasks: Sequence[TaskSpec],
        n_prompts: int,
        m: int,
        rng: np.random.Generator,
        ) -> float:
    """exact-match rate of greedy decoding on fresh single-task prompts with m examples"""
    if n_prompts < 1:
        raise ContractError(f'n_prompts must be at least 1, got {n_prompts}')
    correct = 0
    for _ in range(n_prompts):
        task = tasks[int(rng.integers(len(tasks)))]
        prompt = make_mixture_prompt([task], [1.0], m, rng)
        answer = task.answer(prompt.query)
        decoded = greedy_decode(weights, config, prompt.tokens, len(answer))
        correct += VOCAB.decode(decoded) == answer
    return correct / n_prompts


"""
pydantic models for validation
"""

class SweepPoint(StrictBaseModel):
    lam: float = Field(ge=0.0, le=1.0)
    p_task_a: float = Field(ge=0.0, le=1.0)
    p_task_b: float = Field(ge=0.0, le=1.0)
    p_other: float = Field(ge=0.0, le=1.0)
    std_task_a: float = Field(ge=0.0)
    std_task_b: float = Field(ge=0.0)
    std_other: float = Field(ge=0.0)
    n: int = Field(ge=1)

    @model_validator(mode='after')
    def check_closure(self):
        if abs(self.p_task_a + self.p_task_b + self.p_other - 1.0) > 1e-6:
            raise ValueError(f'sweep point at lambda={self.lam} does not sum to 1')
        return self


class SweepResult(StrictBaseModel):
    task_a: str
    task_b: str
    points: list[SweepPoint]

    @property
    def lambdas(self) -> list[float]:
        return [p.lam for p in self.points]


def aggregate_point(lam: float, distributions: Sequence[probe.OutputDistribution]) -> SweepPoint:
    """mean and standard deviation of the two task probabilities and the rest"""
    values = np.array([[d.probabilities[0], d.probabilities[1], d.other] for d in distributions])
    mean, std = values.mean(axis=0), values.std(axis=0)
    return SweepPoint(
        lam=lam,
        p_task_a=float(mean[0]), p_task_b=float(mean[1]), p_other=float(mean[2]),
        std_task_a=float(std[0]), std_task_b=float(std[1]), std_other=float(std[2]),
        n=len(distributions),
    )


def lambda_grid(points: int) -> list[float]:
    """points equally spaced values from 0 to 1, both included"""
    if points < 2:
        raise ContractError(f'a lambda grid needs at least 2 points, got {points}')
    return [i / (points - 1) for i in range(points)]


def eval_mixture_sweep(
        weights: TransformerWeights,
        config: TransformerConfig,
        task_a: TaskSpec,
        task_b: TaskSpec,
        grid: Sequence[float],
        prompts_per_point: int,
        m_total: int,
        rng: np.random.Generator,
        workers: int = 1,
        ) -> SweepResult:
    """
    For every lambda, average the output distribution over prompts with examples distributed
    [lambda, 1 - lambda] over task_a and task_b. Prompt i of grid point j is drawn from its own
    stream, so results don't depend on the worker count.
    """
    if any(not 0.0 <= lam <= 1.0 for lam in grid):
        raise ContractError(f'mixture ratios must lie in [0, 1], got {list(grid)}')
    base = draw_base_seed(rng)
    backend = probe.ModelBackend(weights, config)

    def measure(j: int, lam: float, i: int) -> probe.OutputDistribution:
        prompt = make_mixture_prompt([task_a, task_b], [lam, 1.0 - lam], m_total, derive_rng(base, j, i))
        return probe.task_output_distribution(backend, prompt, [task_a, task_b], prompt_id=f'{j}.{i}')

    points: list[SweepPoint] = []
    with ThreadPoolExecutor(max_workers=workers) as executor:
        for j, lam in enumerate(grid):
            distributions = list(executor.map(lambda i: measure(j, lam, i), range(prompts_per_point)))
            point = aggregate_point(lam, distributions)
            points.append(point)
            logger.info('lambda %.3f: P(%s)=%.4f P(%s)=%.4f other=%.4f',
                        lam, task_a.name, point.p_task_a, task_b.name, point.p_task_b, point.p_other)
            events.sweep_point.emit(events.ProgressData('sweep', j + 1, len(grid)))
    return SweepResult(task_a=task_a.name, task_b=task_b.name, points=points)


"""
csv output
"""

def write_loss_curve(path: Path, records: Sequence[LossRecord]) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['step', 'loss', 'tokens'])
        for record in records:
            writer.writerow([record.step, repr(record.loss), record.tokens])


SWEEP_COLUMNS = ('lambda', 'p_task_a', 'p_task_b', 'p_other', 'std_task_a', 'std_task_b', 'std_other', 'n')


def write_sweep(path: Path, result: SweepResult) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SWEEP_COLUMNS)
        for p in result.points:
            writer.writerow([
                repr(p.lam), repr(p.p_task_a), repr(p.p_task_b), repr(p.p_other),
                repr(p.std_task_a), repr(p.std_task_b), repr(p.std_other), p.n,
            ])
