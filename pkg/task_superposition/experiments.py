"""the pipelines behind the command line subcommands, one function per subcommand"""

import asyncio
import csv
import logging
from collections.abc import Callable
from pathlib import Path

import numpy as np

from .artifacts import RunDirectory, write_json
from .config import ConstructConfig, ProbeConfig, RemoteConfig, SweepConfig, TaskvecConfig, TrainConfig
from .errors import ContractError, UsageError
from .model import checkpoint, probe, taskvec, training
from .model.construction import (
    ConstructionSpec, assemble, make_construction_prompt, parse_tasks, verify_superposition,
)
from .model.mock import PrefixTableModel
from .model.taskgen import (
    TaskSpec, dump_prompts, is_probability_vector, load_prompts, make_mixture_prompt, mixture_counts, task_by_name,
)
from .model.transformer import TransformerConfig, TransformerWeights
from .remote.scoring import Scorer, run_mixture_protocol, write_protocol_result
from .remote.settings import setting_by_name
from .remote.transport import HttpTransport, MockTransport
from .util import derive_rng, draw_base_seed

logger = logging.getLogger(__name__)


def parse_task_names(text: str, count: int | None = None) -> list[TaskSpec]:
    tasks = [task_by_name(name.strip()) for name in text.split(',') if name.strip()]
    if count is not None and len(tasks) != count:
        raise UsageError(f'expected {count} task names, got {text!r}')
    return tasks


def parse_distribution(text: str, K: int) -> list[float]:
    """'D1', 'D2', 'D3' or comma separated probabilities"""
    if text in ('D1', 'D2', 'D3'):
        return probe.named_distribution(text, K)
    try:
        D = [float(p) for p in text.split(',')]
    except ValueError:
        raise UsageError(f'cannot parse distribution {text!r}') from None
    if len(D) != K or not is_probability_vector(D):
        raise UsageError(f'{text!r} is no probability vector over {K} tasks')
    return D


"""
train and sweep
"""

def run_train(config: TrainConfig, run: RunDirectory) -> None:
    result = training.train(config)
    checkpoint.save_checkpoint(
        run.file('checkpoint'), result.config, result.weights,
        meta={'family': config.family, 'seed': config.seed, 'steps': config.steps},
    )
    training.write_loss_curve(run.file('loss.csv'), result.losses)
    write_json(run.file('summary.json'), {
        'family': config.family,
        'steps': config.steps,
        'final_loss': result.losses[-1].loss,
        'accuracy': result.accuracy,
    })


def run_sweep(config: SweepConfig, run: RunDirectory) -> None:
    model_config, weights, _ = checkpoint.load_checkpoint(Path(config.checkpoint))
    task_a, task_b = parse_task_names(config.tasks, 2)
    result = training.eval_mixture_sweep(
        weights, model_config, task_a, task_b, training.lambda_grid(config.grid),
        config.prompts_per_point, config.m_total, derive_rng(config.seed), config.workers,
    )
    training.write_sweep(run.file('sweep.csv'), result)


"""
construction
"""

P_GRID = [k / 6 for k in range(7)]
VERIFICATION_COLUMNS = (
    'p_target', 'task', 'p', 'p_expected', 'weight', 'weight_closed_form', 'weight_softmax', 'weight_limit',
    'output', 'prediction',
)


def construction_spec(config: ConstructConfig) -> ConstructionSpec:
    """copy tasks run on the integer values 0 .. value_count - 1, functions on values spread over the radius"""
    tasks = parse_tasks(config.tasks, config.radius, config.relu_budget)
    if all(t.is_copy for t in tasks):
        values = np.arange(config.value_count, dtype=np.float64)
    else:
        values = np.linspace(-config.radius, config.radius, config.value_count)
    return ConstructionSpec(
        tasks=tasks,
        n=config.n,
        m=config.m,
        values=values,
        C_threshold=config.C_threshold,
        C_attend=config.C,
        C_execute=config.C_execute or None,
        relu_budget=config.relu_budget,
        radius=config.radius,
        n_layers=config.n_layers,
        d_model=config.d_model or None,
    )


def verification_labels(spec: ConstructionSpec, p: float, rng: np.random.Generator) -> list[str | None]:
    """a share p of the examples labelled by the first task, the rest by the others (or foreign for one task)"""
    K = len(spec.tasks)
    if K == 1:
        counts = mixture_counts([p, 1.0 - p], spec.m)
        names: list[str | None] = [spec.tasks[0].name, None]
    else:
        counts = mixture_counts([p] + [(1.0 - p) / (K - 1)] * (K - 1), spec.m)
        names = [t.name for t in spec.tasks]
    labels = [name for name, count in zip(names, counts) for _ in range(count)]
    return [labels[i] for i in rng.permutation(len(labels))]


def run_construct(config: ConstructConfig, run: RunDirectory) -> None:
    spec = construction_spec(config)
    model = assemble(spec)
    run.file('layout.txt').write_text(model.report(), encoding='utf-8')
    checkpoint.save_checkpoint(run.file('checkpoint'), model.config, model.weights, meta={'tasks': config.tasks})

    with open(run.file('verification.csv'), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(VERIFICATION_COLUMNS)
        for k, p in enumerate(P_GRID):
            prompt = make_construction_prompt(spec, verification_labels(spec, p, derive_rng(config.seed, k)),
                                              derive_rng(config.seed, k, 1))
            for reading in verify_superposition(model, prompt):
                writer.writerow([
                    repr(p), reading.task, repr(reading.p), repr(reading.p_expected), repr(reading.weight),
                    repr(reading.weight_closed_form), repr(reading.weight_softmax), repr(reading.weight_limit),
                    ' '.join(repr(float(v)) for v in reading.output),
                    ' '.join(repr(float(v)) for v in reading.prediction),
                ])
            logger.info('p=%.4f verified for %d streams', p, len(spec.tasks))


"""
probe
"""

def probe_backend(config: ProbeConfig) -> probe.Backend:
    if bool(config.checkpoint) == bool(config.fixture):
        raise UsageError('give exactly one of checkpoint and fixture')
    if config.fixture:
        if not config.prompts:
            raise UsageError('a fixture model needs the prompt dump it was built for (prompts)')
        return PrefixTableModel.load(Path(config.fixture))
    model_config, weights, _ = checkpoint.load_checkpoint(Path(config.checkpoint))
    return probe.ModelBackend(weights, model_config)


def run_probe(config: ProbeConfig, run: RunDirectory) -> None:
    backend = probe_backend(config)
    tasks = parse_task_names(config.tasks)
    D = parse_distribution(config.distribution, len(tasks))

    if config.prompts:
        prompts = load_prompts(Path(config.prompts))
    else:
        base = draw_base_seed(derive_rng(config.seed))
        prompts = [make_mixture_prompt(tasks, D, config.m_total, derive_rng(base, i)) for i in range(config.n_prompts)]

    rows = [
        probe.evaluate_prompt(backend, prompt, tasks, D, str(i), config.beam_width or None)
        for i, prompt in enumerate(prompts)
    ]
    dump_prompts(run.file('prompts.jsonl'), prompts)
    probe.metric_report(rows, run.file('metrics.csv'), run.file('summary.json'))


"""
task vectors
"""

def run_taskvec(config: TaskvecConfig, run: RunDirectory) -> None:
    model_config, weights, _ = checkpoint.load_checkpoint(Path(config.checkpoint))
    task_a, task_b = parse_task_names(config.tasks, 2)

    scans = [
        taskvec.scan_layers(weights, model_config, task, derive_rng(config.seed, 0, k), config.n_prompts, config.m)
        for k, task in enumerate((task_a, task_b))
    ]
    v_a, v_b = taskvec.select_common_task_vectors(*scans)
    taskvec.save_task_vector(run.file(f'vector_{task_a.name}'), v_a)
    taskvec.save_task_vector(run.file(f'vector_{task_b.name}'), v_b)

    with open(run.file('layers.csv'), 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['layer (0-based)', f'accuracy_{task_a.name}', f'accuracy_{task_b.name}'])
        for layer, (acc_a, acc_b) in enumerate(zip(scans[0].accuracies, scans[1].accuracies)):
            writer.writerow([layer, repr(acc_a), repr(acc_b)])

    curve = taskvec.patched_mixture_curve(
        weights, model_config, v_a, v_b, task_a, task_b, training.lambda_grid(config.grid),
        derive_rng(config.seed, 1), config.n_queries,
    )
    training.write_sweep(run.file('patched_sweep.csv'), curve)

    logger.info('task vectors of %s and %s at layer %d (0-based, of %d)', task_a.name, task_b.name, v_a.layer, model_config.n_layers)
    summary: dict[str, object] = {'layer': v_a.layer, 'layer_index_base': 0}
    for k, (task, vector) in enumerate(((task_a, v_a), (task_b, v_b))):
        icl = training.evaluate_accuracy(
            weights, model_config, [task], config.n_prompts, config.m, derive_rng(config.seed, 2, k),
        )
        summary[task.name] = {'icl_accuracy': icl, 'patched_accuracy': vector.accuracy}
    summary['coverage_at_half'] = taskvec.patched_coverage(
        weights, model_config, v_a, v_b, task_a, task_b, 0.5, derive_rng(config.seed, 3), config.n_queries,
    )

    if config.mixture:
        D = parse_distribution(config.mixture, 2)
        summary['lda'] = write_lda(run.file('lda.csv'), weights, model_config, task_a, task_b, D, v_a.layer, config)
    write_json(run.file('summary.json'), summary)


def write_lda(
        path: Path, weights: TransformerWeights, model_config: TransformerConfig, task_a: TaskSpec, task_b: TaskSpec, D: list[float], layer: int,
        config: TaskvecConfig,
        ) -> list[float]:
    """
    Projects per-prompt features of both tasks and of mixture prompts onto the discriminant axes of
    the two tasks. Returns the projection of the averaged mixture feature.
    """
    base = draw_base_seed(derive_rng(config.seed, 4))
    classes: list[tuple[str, list[TaskSpec], list[float]]] = [
        (task_a.name, [task_a], [1.0]), (task_b.name, [task_b], [1.0]), ('mixture', [task_a, task_b], D),
    ]
    features, labels = [], []
    for k, (label, tasks, mix) in enumerate(classes):
        for i in range(config.n_prompts):
            prompt = make_mixture_prompt(tasks, mix, config.m, derive_rng(base, k, i))
            features.append(taskvec.prompt_features(weights, model_config, prompt)[layer])
            labels.append(label)
    features_array = np.array(features)

    individual = [i for i, label in enumerate(labels) if label != 'mixture']
    axes = taskvec.lda_axes(features_array[individual], [labels[i] for i in individual])
    points = features_array @ axes

    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['label', 'x', 'y'])
        for label, (x, y) in zip(labels, points):
            writer.writerow([label, repr(float(x)), repr(float(y))])

    mixed = taskvec.mixture_task_vector(
        weights, model_config, [task_a, task_b], D, layer, derive_rng(config.seed, 5), config.n_prompts, config.m,
    )
    return [float(v) for v in mixed @ axes]


"""
remote protocol
"""

def remote_transport(config: RemoteConfig) -> MockTransport | HttpTransport:
    if config.fixture:
        return MockTransport(PrefixTableModel.load(Path(config.fixture)), max_in_flight=config.max_in_flight)
    if not config.url:
        raise UsageError('set SUPERPOSITION_API_URL or give a fixture for the mock transport')
    return HttpTransport(config.url, config.api_key, max_in_flight=config.max_in_flight, seed=config.seed)


async def _remote_protocol(config: RemoteConfig):
    transport = remote_transport(config)
    scorer = Scorer(transport, config.model or 'mock', config.logprobs)
    try:
        return await run_mixture_protocol(
            transport, setting_by_name(config.setting), config.n_prompts, derive_rng(config.seed),
            config.examples_per_task, scorer,
        )
    finally:
        if isinstance(transport, HttpTransport):
            await transport.aclose()


def run_remote(config: RemoteConfig, run: RunDirectory) -> None:
    result = asyncio.run(_remote_protocol(config))
    write_protocol_result(run.file('distributions.csv'), run.file('failures.csv'), result)
    write_json(run.file('summary.json'), result.summary())
    if not result.distributions:
        raise ContractError(f'all {len(result.failures)} prompts failed')


RUNNERS: dict[str, Callable[..., None]] = {
    'train': run_train,
    'sweep': run_sweep,
    'construct': run_construct,
    'probe': run_probe,
    'taskvec': run_taskvec,
    'remote': run_remote,
}
