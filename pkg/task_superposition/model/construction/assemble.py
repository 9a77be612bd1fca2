"""assembly of the superposition model and verification against its closed forms"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ...errors import CapacityError, ContractError, LayoutError, SpecError, VerificationError
from ..numerics import row_softmax
from ..transformer import (
    PositionalMode, TransformerConfig, TransformerWeights, binary_position_code, forward, zero_weights,
)
from .layers import (
    AttentionHead, MlpBlock, build_execution_layers, build_label_flag_layers, build_proportion_attention,
    build_task_stream, build_threshold_mlp,
)
from .layout import ResidualLayout
from .plan import ConstructionSpec, ConstructionTask, plan_layout

logger = logging.getLogger(__name__)

# layer of each building step; layers from ACTIVE_LAYERS on are identity
FLAG_LAYER, ALIGN_LAYER, THRESHOLD_LAYER, PROPORTION_LAYER, EXECUTION_LAYER = range(5)
ACTIVE_LAYERS = 5


@dataclass
class ConstructedModel:
    spec: ConstructionSpec
    config: TransformerConfig
    weights: TransformerWeights
    layout: ResidualLayout
    provenance: list[list[str]]  # per layer, the building steps that filled it

    def report(self) -> str:
        lines = [
            f'tasks: {", ".join(t.name for t in self.spec.tasks)}',
            f'n={self.spec.n} m={self.spec.m} L={self.spec.length} d={self.spec.d}',
            f'C_attend={self.spec.C_attend} C_threshold={self.spec.C_threshold} '
            f'C_execute={self.spec.execute_constant}',
            f'layers={self.config.n_layers} heads={self.config.n_heads} '
            f'd_model={self.config.d_model} d_mlp={self.config.d_mlp}',
            '',
            self.layout.report(),
            '',
            'layers:',
        ]
        for layer, steps in enumerate(self.provenance):
            lines.append(f'  {layer}: ' + ('; '.join(steps) if steps else 'identity'))
        return '\n'.join(lines) + '\n'


def execution_weight(p: float, C: float, length: int) -> float:
    """e^p / (e^p + e^(1-p) + (L - 2) e^-C), the weight of a stream whose context proportion is p"""
    return math.exp(p) / (math.exp(p) + math.exp(1 - p) + (length - 2) * math.exp(-C))


def execution_weight_limit(p: float) -> float:
    """1 / (1 + e^(1-2p)), the weight for C -> infinity"""
    return 1.0 / (1.0 + math.exp(1 - 2 * p))


def _positional_table(spec: ConstructionSpec, layout: ResidualLayout) -> np.ndarray:
    L, width = spec.length, spec.code_width
    table = np.zeros((L, layout.size))

    def code(position: int) -> np.ndarray:
        return binary_position_code(position, width) if position >= 0 else np.zeros(width)

    for t in range(L):
        table[t, layout.rows('pos').start:layout.rows('pos').stop] = code(t)
        table[t, layout.rows('shift1').start:layout.rows('shift1').stop] = code(t - 1)
        for task in spec.tasks:
            s = task.offset(spec.n)
            shift, query_shift = layout.stream_rows(task.name, 'shift'), layout.stream_rows(task.name, 'query_shift')
            table[t, shift.start:shift.stop] = code(t - s)
            table[t, query_shift.start:query_shift.stop] = code(t - (s - 1))
    table[L - 1, layout.rows('final')[0]] = 1.0
    if L >= 2:
        table[L - 2, layout.rows('penult')[0]] = 1.0
    return table


def _token_table(spec: ConstructionSpec, layout: ResidualLayout) -> np.ndarray:
    table = np.zeros((spec.vocab_size, layout.size))
    x = layout.rows('x')
    table[:len(spec.values), x.start:x.stop] = spec.values
    table[spec.equals_id, layout.rows('flag')[0]] = 1.0
    table[:, layout.rows('one')[0]] = 1.0
    return table


def assemble(spec: ConstructionSpec) -> ConstructedModel:
    """
    Builds the model layer by layer, one head and one mlp block per task stream:
      0: flag moves onto labels; mlp computes g(x)
      1: predictions move onto labels; mlp computes differences and L1 norms
      2: query predictions move to the end; mlp thresholds and cleans up
      3: proportions of matching labels; mlp stages execution scores
      4: weighted execution
    and identity layers up to spec.n_layers.
    """
    layout = plan_layout(spec)
    if spec.d_model is not None:
        if spec.d_model < layout.used:
            raise CapacityError(required=layout.used, available=spec.d_model)
        layout.pad_to(spec.d_model)
    D = layout.size
    K = len(spec.tasks)

    flag_heads = build_label_flag_layers(layout, spec.C_attend)
    streams = {task.name: build_task_stream(task, layout, spec.C_attend) for task in spec.tasks}
    thresholds = {
        task.name: build_threshold_mlp(task.name, spec.C_threshold, layout, 1.0 + spec.difference_bound(task))
        for task in spec.tasks
    }
    proportions = {task.name: build_proportion_attention(task.name, layout, spec.C_attend) for task in spec.tasks}
    executions = {
        task.name: build_execution_layers(task.name, spec.execute_constant, layout, spec.prediction_bound(task))
        for task in spec.tasks
    }

    names = [task.name for task in spec.tasks]
    layer_heads: list[list[AttentionHead]] = [
        flag_heads,
        [streams[n].shift for n in names],
        [streams[n].query_shift for n in names],
        [proportions[n] for n in names],
        [executions[n][1] for n in names],
    ]
    layer_mlps: list[list[MlpBlock]] = [
        [streams[n].predict for n in names],
        [streams[n].compare for n in names],
        [thresholds[n] for n in names],
        [executions[n][0] for n in names],
        [],
    ]

    mlps = [MlpBlock.concat(blocks, D) for blocks in layer_mlps]
    config = TransformerConfig(
        n_layers=spec.n_layers,
        n_heads=max(2, K),
        d_model=D,
        d_head=D,
        d_mlp=max(1, max(m.units for m in mlps)),
        vocab_size=spec.vocab_size,
        max_seq_len=spec.length,
        positional_mode=PositionalMode.BINARY_FIXED,
        attention_scaling=False,
    )
    weights = zero_weights(config)
    weights.token_embed = _token_table(spec, layout)
    weights.pos_embed = _positional_table(spec, layout)

    provenance: list[list[str]] = [[] for _ in range(spec.n_layers)]
    for layer, heads in enumerate(layer_heads):
        for h, head in enumerate(heads):
            weights.W_Q[layer, h] = head.W_Q
            weights.W_K[layer, h] = head.W_K
            weights.W_V[layer, h] = head.W_V
            weights.W_O[layer, h] = head.W_O
            provenance[layer].append(f'head {h}: {head.provenance}')
    for layer, mlp in enumerate(mlps):
        units = mlp.units
        weights.W_in[layer, :, :units] = mlp.W_in
        weights.b_in[layer, :units] = mlp.b_in
        weights.W_out[layer, :units, :] = mlp.W_out
        weights.b_out[layer] = mlp.b_out
        if units:
            provenance[layer].append(f'mlp: {mlp.provenance}')

    logger.info('assembled %d-stream model: d_model=%d, d_mlp=%d, L=%d', K, D, config.d_mlp, spec.length)
    return ConstructedModel(spec, config, weights, layout, provenance)


"""
prompts of the constructed model
"""

@dataclass
class ConstructionPrompt:
    """token ids of m examples and the query; labels name the task each example was labelled by (None: foreign)"""
    tokens: np.ndarray
    inputs: np.ndarray  # (m + 1, n) value indices, the last row is the query
    labels: list[str | None]


def _value_index(spec: ConstructionSpec, value: np.ndarray) -> int | None:
    matches = np.flatnonzero(np.all(np.abs(spec.values - value) < 1e-12, axis=1))
    return int(matches[0]) if len(matches) else None


def make_construction_prompt(
        spec: ConstructionSpec, labels: Sequence[str | None], rng: np.random.Generator, max_tries: int = 1000,
        ) -> ConstructionPrompt:
    """
    Examples with distinct input values, each labelled by the named task or, for None,
    by a value that no task would produce from it.
    """
    if len(labels) != spec.m:
        raise ContractError(f'expected {spec.m} labels, got {len(labels)}')
    if spec.n > len(spec.values):
        raise SpecError(f'{spec.n} distinct inputs per example need at least as many token values')
    tasks = {t.name: t for t in spec.tasks}
    unknown = {l for l in labels if l is not None} - set(tasks)
    if unknown:
        raise SpecError(f'labels name unknown tasks {sorted(unknown)}')

    tokens: list[int] = []
    inputs: list[np.ndarray] = []
    for label in list(labels) + ['<query>']:
        for _ in range(max_tries):
            x = rng.choice(len(spec.values), size=spec.n, replace=False)
            if label == '<query>':
                y = None
                break
            answers = {t.name: _value_index(spec, t.apply(spec.values[x[t.index - 1]])) for t in spec.tasks}
            if label is None:
                produced = {a for a in answers.values() if a is not None}
                candidates = [v for v in range(len(spec.values)) if v not in produced and _is_foreign(spec, x, v)]
                if candidates:
                    y = candidates[int(rng.integers(len(candidates)))]
                    break
            elif answers[label] is not None:
                y = answers[label]
                break
        else:
            raise SpecError(f'could not sample an example for label {label!r} from the token values')

        inputs.append(x)
        tokens += [int(v) for v in x] + [spec.equals_id]
        if y is not None:
            tokens.append(y)

    return ConstructionPrompt(np.array(tokens, dtype=np.int64), np.array(inputs), list(labels))


def _is_foreign(spec: ConstructionSpec, x: np.ndarray, value_index: int) -> bool:
    """the value is at least 1/C_threshold away from every task's answer in L1"""
    y = spec.values[value_index]
    return all(
        np.sum(np.abs(t.apply(spec.values[x[t.index - 1]]) - y)) >= 1.0 / spec.C_threshold
        for t in spec.tasks
    )


def expected_proportion(spec: ConstructionSpec, task: ConstructionTask, prompt: ConstructionPrompt) -> float:
    """mean over examples of ReLU(1 - C |g(x_i) - y|_1), with the exact g"""
    matches = []
    for j in range(spec.m):
        x = prompt.inputs[j]
        y = spec.values[prompt.tokens[spec.label_positions()[j]]]
        z = float(np.sum(np.abs(task.apply(spec.values[x[task.index - 1]]) - y)))
        matches.append(max(0.0, 1.0 - spec.C_threshold * z))
    return float(np.mean(matches))


"""
verification
"""

@dataclass
class StreamReading:
    task: str
    p: float  # proportion read from the model
    p_expected: float
    weight: float  # weight read from the model
    weight_closed_form: float
    weight_softmax: float  # independent softmax over the traced scores
    weight_limit: float
    output: np.ndarray  # weighted prediction w f(x_query)
    prediction: np.ndarray  # f(x_query) with the exact g


def verify_superposition(
        model: ConstructedModel, prompt: ConstructionPrompt, check: bool = True,
        ) -> list[StreamReading]:
    """
    Runs the prompt and reads every stream's proportion, weight and weighted output at the final position.
    With check=True a VerificationError is raised when a reading disagrees with its oracle.
    """
    spec, layout = model.spec, model.layout
    if len(prompt.tokens) != spec.length:
        raise ContractError(f'prompt has {len(prompt.tokens)} tokens, the model is built for {spec.length}')

    _, trace = forward(model.weights, model.config, prompt.tokens, trace=True)
    assert trace is not None
    final = trace.residual[-1][-1]
    scores_residual = trace.layer_output(PROPORTION_LAYER)
    query = prompt.inputs[-1]

    readings = []
    for task in spec.tasks:
        prop, score = layout.stream_rows(task.name, 'prop'), layout.stream_rows(task.name, 'score')
        out = layout.stream_rows(task.name, 'out')
        if out.stop > final.shape[0]:
            raise LayoutError(f'rows of {task.name} lie outside the residual stream')

        p = float(final[prop.start])
        weight = float(final[out.stop - 1])
        weight_softmax = float(row_softmax(scores_residual[:, score.start])[-1])
        reading = StreamReading(
            task=task.name,
            p=p,
            p_expected=expected_proportion(spec, task, prompt),
            weight=weight,
            weight_closed_form=execution_weight(p, spec.execute_constant, spec.length),
            weight_softmax=weight_softmax,
            weight_limit=execution_weight_limit(p),
            output=final[out.start:out.stop - 1].copy(),
            prediction=task.apply(spec.values[query[task.index - 1]]),
        )
        if check:
            _check_reading(spec, task, reading)
        readings.append(reading)
    return readings


def _check_reading(spec: ConstructionSpec, task: ConstructionTask, reading: StreamReading) -> None:
    fit_error = 0.0
    if not task.is_copy and task.relus is not None:
        fit_error = float(np.max(np.abs(task.approximate(spec.values[:, 0]) - task.apply(spec.values[:, 0]))))
    p_tolerance = 1e-9 + spec.C_threshold * fit_error

    if abs(reading.p - reading.p_expected) > p_tolerance:
        raise VerificationError(
            f'{task.name}: proportion {reading.p:.12g} differs from the label count {reading.p_expected:.12g}'
        )
    if abs(reading.weight - reading.weight_closed_form) > 1e-9:
        raise VerificationError(
            f'{task.name}: weight {reading.weight:.15g} differs from the closed form {reading.weight_closed_form:.15g}'
        )
    if abs(reading.weight - reading.weight_softmax) > 1e-12 * abs(reading.weight_softmax):
        raise VerificationError(
            f'{task.name}: weight {reading.weight:.17g} differs from the softmax of the traced scores '
            f'{reading.weight_softmax:.17g}'
        )
