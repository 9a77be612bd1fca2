"""
task vectors: extraction, patched evaluation, interpolation and projection

Layers are numbered from 0, layer 0 being the first transformer block. The feature of a prompt
at layer l is the output of layer l at the query's final '>' token.
Averaged over single-task prompts it becomes a candidate task vector v(l); patching v(l) into a
zero-shot prompt (one neutral dummy example and the query) and decoding greedily measures how
well v(l) carries the task. The layer with the best accuracy holds the task vector.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .. import events
from ..errors import ContractError, DegeneracyError, LayerMismatchError, SequenceLengthError
from ..util import derive_rng, draw_base_seed
from . import checkpoint, probe
from .taskgen import (
    VOCAB, MixturePrompt, TaskSpec, make_mixture_prompt, make_zero_shot_prompt, task_family,
)
from .training import SweepResult, aggregate_point
from .transformer import PatchDirective, TransformerConfig, TransformerWeights, forward, greedy_decode

logger = logging.getLogger(__name__)

LDA_RIDGE = 1e-6


@dataclass
class LayerScan:
    task: str
    vectors: np.ndarray          # (n_layers, d_model), v(l) per layer
    accuracies: list[float]      # patched zero-shot accuracy per layer

    def __post_init__(self) -> None:
        if len(self.vectors) != len(self.accuracies):
            raise ContractError(f'{len(self.vectors)} layer vectors but {len(self.accuracies)} accuracies')


@dataclass
class TaskVector:
    task: str
    layer: int
    vector: np.ndarray
    accuracy: float

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ContractError(f'task vector of {self.task} has non-finite entries')
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f'accuracy {self.accuracy} outside [0, 1]')


def prompt_features(
        weights: TransformerWeights, config: TransformerConfig, prompt: MixturePrompt,
        ) -> np.ndarray:
    """(n_layers, d_model) layer outputs at the feature position of one prompt"""
    if len(prompt.tokens) > config.max_seq_len:
        raise SequenceLengthError(f'prompt of length {len(prompt.tokens)} exceeds max_seq_len={config.max_seq_len}')
    _, trace = forward(weights, config, prompt.tokens, trace=True)
    return np.stack([trace.layer_output(l)[prompt.feature_position] for l in range(config.n_layers)])


def average_features(
        weights: TransformerWeights, config: TransformerConfig, prompts: Sequence[MixturePrompt],
        ) -> np.ndarray:
    """mean features over prompts, summed in prompt order"""
    if not prompts:
        raise ContractError('cannot average the features of zero prompts')
    total = np.zeros((config.n_layers, config.d_model))
    for prompt in prompts:
        total += prompt_features(weights, config, prompt)
    return total / len(prompts)


def zero_shot_queries(tasks: Sequence[TaskSpec], n_queries: int, base: int) -> list[MixturePrompt]:
    """fresh zero-shot prompts of the family of tasks[0], query i drawn from its own stream"""
    family = task_family(tasks[0].family)
    prompts = []
    for i in range(n_queries):
        rng = derive_rng(base, i)
        prompts.append(make_zero_shot_prompt(family, tasks[0].input_sampler(rng), rng))
    return prompts


def patched_backend(
        weights: TransformerWeights, config: TransformerConfig, prompt: MixturePrompt,
        vector: np.ndarray | None, layer: int | None,
        ) -> probe.ModelBackend:
    patches = () if vector is None else (PatchDirective(layer, prompt.feature_position, np.asarray(vector)),)
    return probe.ModelBackend(weights, config, patches)


def patched_accuracy(
        weights: TransformerWeights,
        config: TransformerConfig,
        task: TaskSpec,
        prompts: Sequence[MixturePrompt],
        vector: np.ndarray | None = None,
        layer: int | None = None,
        ) -> float:
    """exact-match greedy accuracy on zero-shot prompts, patched at (layer, feature position) if a vector is given"""
    correct = 0
    for prompt in prompts:
        answer = task.answer(prompt.query)
        backend = patched_backend(weights, config, prompt, vector, layer)
        decoded = greedy_decode(weights, config, prompt.tokens, len(answer), backend.patches)
        correct += VOCAB.decode(decoded) == answer
    return correct / len(prompts)


def scan_layers(
        weights: TransformerWeights,
        config: TransformerConfig,
        task: TaskSpec,
        rng: np.random.Generator,
        n_prompts: int = 100,
        m: int = 60,
        ) -> LayerScan:
    if n_prompts < 1:
        raise ContractError(f'n_prompts must be at least 1, got {n_prompts}')
    base = draw_base_seed(rng)
    prompts = [make_mixture_prompt([task], [1.0], m, derive_rng(base, 0, i)) for i in range(n_prompts)]
    vectors = average_features(weights, config, prompts)

    queries = zero_shot_queries([task], n_prompts, draw_base_seed(derive_rng(base, 1)))
    accuracies = []
    for layer in range(config.n_layers):
        accuracies.append(patched_accuracy(weights, config, task, queries, vectors[layer], layer))
        logger.info('%s: layer %d patched accuracy %.3f', task.name, layer, accuracies[-1])
        events.layer_scanned.emit(events.ProgressData('taskvec', layer + 1, config.n_layers))
    return LayerScan(task.name, vectors, accuracies)


def select_task_vector(scan: LayerScan) -> TaskVector:
    """layer of maximal patched accuracy, the lowest such layer on ties"""
    if not scan.accuracies:
        raise ContractError('empty layer scan')
    layer = int(np.argmax(scan.accuracies))
    return TaskVector(scan.task, layer, scan.vectors[layer].copy(), float(scan.accuracies[layer]))


def select_common_task_vectors(scan_a: LayerScan, scan_b: LayerScan) -> tuple[TaskVector, TaskVector]:
    """
    Task vectors of both scans at one layer: each task's best layer when they agree, otherwise the
    layer of the best summed accuracy (lowest on ties).
    """
    v_a, v_b = select_task_vector(scan_a), select_task_vector(scan_b)
    if v_a.layer == v_b.layer:
        return v_a, v_b
    if len(scan_a.accuracies) != len(scan_b.accuracies):
        raise LayerMismatchError(f'scans over {len(scan_a.accuracies)} and {len(scan_b.accuracies)} layers')
    layer = int(np.argmax(np.add(scan_a.accuracies, scan_b.accuracies)))
    logger.warning('best layers of %s (%d) and %s (%d) differ, using layer %d for both',
                   scan_a.task, v_a.layer, scan_b.task, v_b.layer, layer)
    return (
        TaskVector(scan_a.task, layer, scan_a.vectors[layer].copy(), float(scan_a.accuracies[layer])),
        TaskVector(scan_b.task, layer, scan_b.vectors[layer].copy(), float(scan_b.accuracies[layer])),
    )


def interpolate(v1: TaskVector, v2: TaskVector, lam: float) -> np.ndarray:
    """
    lam v1 + (1 - lam) v2 at their common layer.
    Coordinates on which both agree are taken as they are, the rest is kept within [min, max] of the two.
    """
    if v1.layer != v2.layer:
        raise LayerMismatchError(f'task vectors live at layers {v1.layer} and {v2.layer}')
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f'interpolation weight must lie in [0, 1], got {lam}')
    if v1.vector.shape != v2.vector.shape:
        raise ContractError(f'task vectors of shapes {v1.vector.shape} and {v2.vector.shape}')
    mixed = lam * v1.vector + (1.0 - lam) * v2.vector
    mixed = np.clip(mixed, np.minimum(v1.vector, v2.vector), np.maximum(v1.vector, v2.vector))
    return np.where(v1.vector == v2.vector, v1.vector, mixed)


def patched_distributions(
        weights: TransformerWeights,
        config: TransformerConfig,
        vector: np.ndarray,
        layer: int,
        tasks: Sequence[TaskSpec],
        prompts: Sequence[MixturePrompt],
        ) -> list[probe.OutputDistribution]:
    return [
        probe.task_output_distribution(patched_backend(weights, config, p, vector, layer), p, tasks, prompt_id=str(i))
        for i, p in enumerate(prompts)
    ]


def patched_mixture_curve(
        weights: TransformerWeights,
        config: TransformerConfig,
        v1: TaskVector,
        v2: TaskVector,
        task_a: TaskSpec,
        task_b: TaskSpec,
        grid: Sequence[float],
        rng: np.random.Generator,
        n_queries: int = 100,
        ) -> SweepResult:
    """
    For every lambda, patch interpolate(v1, v2, lambda) into the same n_queries zero-shot prompts
    and average the output distribution over task_a, task_b and the rest.
    """
    queries = zero_shot_queries([task_a, task_b], n_queries, draw_base_seed(rng))
    points = []
    for j, lam in enumerate(grid):
        distributions = patched_distributions(weights, config, interpolate(v1, v2, lam), v1.layer, [task_a, task_b], queries)
        points.append(aggregate_point(lam, distributions))
        logger.info('patched lambda %.3f: P(%s)=%.4f P(%s)=%.4f', lam, task_a.name, points[-1].p_task_a,
                    task_b.name, points[-1].p_task_b)
        events.sweep_point.emit(events.ProgressData('taskvec', j + 1, len(grid)))
    return SweepResult(task_a=task_a.name, task_b=task_b.name, points=points)


def patched_coverage(
        weights: TransformerWeights,
        config: TransformerConfig,
        v1: TaskVector,
        v2: TaskVector,
        task_a: TaskSpec,
        task_b: TaskSpec,
        lam: float,
        rng: np.random.Generator,
        n_queries: int = 100,
        ) -> float:
    """fraction of zero-shot queries whose two task answers are both among the top-2 patched outputs"""
    queries = zero_shot_queries([task_a, task_b], n_queries, draw_base_seed(rng))
    vector = interpolate(v1, v2, lam)
    covered = 0
    for i, prompt in enumerate(queries):
        backend = patched_backend(weights, config, prompt, vector, v1.layer)
        P = probe.task_output_distribution(backend, prompt, [task_a, task_b], prompt_id=str(i))
        covered += probe.top_k_coverage(P, backend, prompt, K=2) == 2
    return covered / n_queries


def mixture_task_vector(
        weights: TransformerWeights,
        config: TransformerConfig,
        tasks: Sequence[TaskSpec],
        D: Sequence[float],
        layer: int,
        rng: np.random.Generator,
        n_prompts: int = 100,
        m_total: int = 60,
        ) -> np.ndarray:
    """averaged feature at `layer` over mixture prompts with example distribution D"""
    base = draw_base_seed(rng)
    prompts = [make_mixture_prompt(tasks, D, m_total, derive_rng(base, i)) for i in range(n_prompts)]
    return average_features(weights, config, prompts)[layer]


def lda_axes(vectors: np.ndarray, labels: Sequence[object]) -> np.ndarray:
    """
    (d, 2) top discriminant axes: generalized eigenvectors of the between-class scatter against the
    ridge regularized within-class scatter. Axes are unit length with their largest entry positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    labels = list(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise ContractError(f'{len(labels)} labels for vectors of shape {X.shape}')
    if X.shape[1] < 2:
        raise ContractError('projecting onto two axes needs vectors of dimension 2 or more')
    classes = sorted(set(labels), key=str)
    if len(classes) < 2:
        raise ContractError('LDA needs at least two classes')

    mean = X.mean(axis=0)
    within = np.zeros((X.shape[1], X.shape[1]))
    between = np.zeros_like(within)
    for c in classes:
        members = X[[i for i, label in enumerate(labels) if label == c]]
        if len(members) < 2:
            raise ContractError(f'class {c!r} has fewer than two vectors')
        centered = members - members.mean(axis=0)
        within += centered.T @ centered
        offset = members.mean(axis=0) - mean
        between += len(members) * np.outer(offset, offset)

    ridge = LDA_RIDGE * np.trace(within)
    if ridge <= 0.0:
        raise DegeneracyError('within-class scatter vanishes, nothing to regularize')
    try:
        _, eigenvectors = scipy.linalg.eigh(between, within + ridge * np.eye(len(within)))
    except np.linalg.LinAlgError as e:
        raise DegeneracyError(f'within-class scatter is singular after regularization: {e}') from e

    axes = eigenvectors[:, ::-1][:, :2].copy()
    for k in range(2):
        axes[:, k] /= np.linalg.norm(axes[:, k])
        if axes[np.argmax(np.abs(axes[:, k])), k] < 0:
            axes[:, k] *= -1.0
    return axes


def lda_project(vectors: np.ndarray, labels: Sequence[object]) -> np.ndarray:
    """(n, 2) coordinates of the vectors on the top two discriminant axes"""
    return np.asarray(vectors, dtype=np.float64) @ lda_axes(vectors, labels)


"""
persistence
"""

def save_task_vector(directory: Path, vector: TaskVector) -> None:
    checkpoint.write_container(
        directory,
        {'vector': vector.vector},
        meta={'task': vector.task, 'layer': vector.layer, 'accuracy': vector.accuracy},
    )


def load_task_vector(directory: Path) -> TaskVector:
    tensors, _, meta = checkpoint.read_container(directory)
    if 'vector' not in tensors or not {'task', 'layer', 'accuracy'} <= set(meta):
        raise checkpoint.CheckpointError(f'{directory} holds no task vector')
    return TaskVector(str(meta['task']), int(meta['layer']), tensors['vector'], float(meta['accuracy']))
