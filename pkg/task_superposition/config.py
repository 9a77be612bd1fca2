"""loads and validates the configuration of every subcommand"""

import logging
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # python 3.10: tomli is the backport tomllib was vendored from
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import cerberus

from .errors import UsageError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """training of a desk-scale model on one task family"""
    seed: int
    family: str          # 'plus' or 'retrieval'
    steps: int
    batch_size: int
    learning_rate: float
    beta1: float         # adam first moment decay
    beta2: float         # adam second moment decay
    epsilon: float
    eval_every: int      # steps between loss log lines and held-out accuracy
    eval_prompts: int
    m_min: int           # examples per training sequence, drawn uniformly from [m_min, m_max]
    m_max: int
    eval_m: int          # examples per held-out evaluation prompt
    n_layers: int
    n_heads: int
    d_model: int
    d_mlp: int
    max_seq_len: int
    workers: int         # threads sharing a batch, the reduction order is fixed


@dataclass(frozen=True)
class SweepConfig:
    """mixture ratio sweep of two tasks on a trained checkpoint"""
    seed: int
    checkpoint: str
    tasks: str           # two task names, e.g. 'plus2,plus6'
    grid: int            # number of equally spaced lambda values in [0, 1]
    prompts_per_point: int
    m_total: int
    workers: int


@dataclass(frozen=True)
class ConstructConfig:
    """explicitly constructed superposition model and its verification"""
    seed: int
    tasks: str           # e.g. 'copy1,copy2,copy3' or 'copy1,square2'
    n: int
    m: int
    C: float             # attention constant of all position matching heads
    C_threshold: float
    C_execute: float     # 0 means: same as C
    relu_budget: int
    radius: float
    n_layers: int
    d_model: int         # 0 means: minimal width
    value_count: int     # scalar token values 0 .. value_count - 1 (scaled into the radius for functions)


@dataclass(frozen=True)
class ProbeConfig:
    """output distributions, top-K coverage and KL on mixture prompts"""
    seed: int
    checkpoint: str      # trained checkpoint, or empty when a fixture model is given
    fixture: str         # prefix table json, or empty
    prompts: str         # prompt dump (json lines) to replay instead of drawing prompts, needed with a fixture
    tasks: str
    distribution: str    # 'D1', 'D2', 'D3' or comma separated probabilities
    n_prompts: int
    m_total: int
    beam_width: int      # 0 means: 4 K


@dataclass(frozen=True)
class TaskvecConfig:
    """task vector extraction, interpolation and projection"""
    seed: int
    checkpoint: str
    tasks: str           # two task names
    n_prompts: int
    m: int
    grid: int
    n_queries: int
    mixture: str         # comma separated distribution for mixed task vectors, or empty


@dataclass(frozen=True)
class RemoteConfig:
    """the measurement protocol against a completion endpoint"""
    seed: int
    setting: str         # 'addition', 'capitals', 'copy_add' or 'letters'
    n_prompts: int
    examples_per_task: int
    fixture: str         # prefix table json served by the mock transport, or empty for http
    max_in_flight: int
    logprobs: int
    url: str
    api_key: str
    model: str


_seed = {'type': 'integer', 'required': True, 'nullable': False, 'min': 0}
_workers = {'type': 'integer', 'default': 1, 'min': 1}

# schemas to validate the values before constructing the dataclass instances
schemas: dict[str, dict[str, dict[str, Any]]] = {
    'train': {
        'seed': _seed,
        'family': {'type': 'string', 'default': 'plus', 'allowed': ['plus', 'retrieval']},
        'steps': {'type': 'integer', 'default': 10_000, 'min': 1},
        'batch_size': {'type': 'integer', 'default': 32, 'min': 1},
        'learning_rate': {'type': 'float', 'coerce': float, 'default': 1e-3, 'min': 1e-12},
        'beta1': {'type': 'float', 'coerce': float, 'default': 0.9, 'min': 0.0, 'max': 0.999999},
        'beta2': {'type': 'float', 'coerce': float, 'default': 0.999, 'min': 0.0, 'max': 0.999999},
        'epsilon': {'type': 'float', 'coerce': float, 'default': 1e-8, 'min': 1e-300},
        'eval_every': {'type': 'integer', 'default': 500, 'min': 1},
        'eval_prompts': {'type': 'integer', 'default': 200, 'min': 1},
        'm_min': {'type': 'integer', 'default': 4, 'min': 2},
        'm_max': {'type': 'integer', 'default': 16, 'min': 2},
        'eval_m': {'type': 'integer', 'default': 20, 'min': 1},
        'n_layers': {'type': 'integer', 'default': 4, 'min': 1},
        'n_heads': {'type': 'integer', 'default': 4, 'min': 1},
        'd_model': {'type': 'integer', 'default': 128, 'min': 1},
        'd_mlp': {'type': 'integer', 'default': 512, 'min': 1},
        'max_seq_len': {'type': 'integer', 'default': 256, 'min': 1},
        'workers': _workers,
    },
    'sweep': {
        'seed': _seed,
        'checkpoint': {'type': 'string', 'required': True, 'empty': False},
        'tasks': {'type': 'string', 'default': 'plus2,plus6', 'regex': r'[a-z]+\d+,[a-z]+\d+'},
        'grid': {'type': 'integer', 'default': 11, 'min': 2},
        'prompts_per_point': {'type': 'integer', 'default': 200, 'min': 1},
        'm_total': {'type': 'integer', 'default': 20, 'min': 1},
        'workers': _workers,
    },
    'construct': {
        'seed': {'type': 'integer', 'default': 0, 'min': 0},
        'tasks': {'type': 'string', 'default': 'copy1,copy2,copy3', 'empty': False},
        'n': {'type': 'integer', 'default': 4, 'min': 1},
        'm': {'type': 'integer', 'default': 24, 'min': 1},
        'C': {'type': 'float', 'coerce': float, 'default': 30.0, 'min': 0.0},
        'C_threshold': {'type': 'float', 'coerce': float, 'default': 20.0, 'min': 0.0},
        'C_execute': {'type': 'float', 'coerce': float, 'default': 0.0, 'min': 0.0},
        'relu_budget': {'type': 'integer', 'default': 65, 'min': 3},
        'radius': {'type': 'float', 'coerce': float, 'default': 1.0, 'min': 0.0},
        'n_layers': {'type': 'integer', 'default': 7, 'min': 5},
        'd_model': {'type': 'integer', 'default': 0, 'min': 0},
        'value_count': {'type': 'integer', 'default': 16, 'min': 2},
    },
    'probe': {
        'seed': _seed,
        'checkpoint': {'type': 'string', 'default': ''},
        'fixture': {'type': 'string', 'default': ''},
        'prompts': {'type': 'string', 'default': ''},
        'tasks': {'type': 'string', 'default': 'ret1,ret2,ret3,ret4,ret5,ret6', 'empty': False},
        'distribution': {'type': 'string', 'default': 'D1', 'empty': False},
        'n_prompts': {'type': 'integer', 'default': 100, 'min': 1},
        'm_total': {'type': 'integer', 'default': 12, 'min': 1},
        'beam_width': {'type': 'integer', 'default': 0, 'min': 0},
    },
    'taskvec': {
        'seed': _seed,
        'checkpoint': {'type': 'string', 'required': True, 'empty': False},
        'tasks': {'type': 'string', 'default': 'ret2,ret6', 'regex': r'[a-z]+\d+,[a-z]+\d+'},
        'n_prompts': {'type': 'integer', 'default': 100, 'min': 1},
        'm': {'type': 'integer', 'default': 20, 'min': 1},
        'grid': {'type': 'integer', 'default': 11, 'min': 2},
        'n_queries': {'type': 'integer', 'default': 100, 'min': 1},
        'mixture': {'type': 'string', 'default': ''},
    },
    'remote': {
        'seed': _seed,
        'setting': {'type': 'string', 'default': 'addition', 'allowed': ['addition', 'capitals', 'copy_add', 'letters']},
        'n_prompts': {'type': 'integer', 'default': 100, 'min': 1},
        'examples_per_task': {'type': 'integer', 'default': 20, 'min': 1},
        'fixture': {'type': 'string', 'default': ''},
        'max_in_flight': {'type': 'integer', 'default': 4, 'min': 1},
        'logprobs': {'type': 'integer', 'default': 5, 'min': 1},
        'url': {'type': 'string', 'default': ''},
        'api_key': {'type': 'string', 'default': ''},
        'model': {'type': 'string', 'default': ''},
    },
}

dataclasses_by_kind = {
    'train': TrainConfig,
    'sweep': SweepConfig,
    'construct': ConstructConfig,
    'probe': ProbeConfig,
    'taskvec': TaskvecConfig,
    'remote': RemoteConfig,
}

# the remote credentials are only ever taken from the environment
_environment = {
    'url': 'SUPERPOSITION_API_URL',
    'api_key': 'SUPERPOSITION_API_KEY',
    'model': 'SUPERPOSITION_API_MODEL',
}


def read_config_file(path: Path) -> dict[str, Any]:
    logger.info('loading config %s', path)
    try:
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f'cannot parse config {path}: {e}') from None
    except OSError as e:
        raise UsageError(f'cannot read config {path}: {e.strerror}') from None


def load_config(kind: str, path: Path | None = None, overrides: dict[str, Any] | None = None):
    """
    Merge defaults, config file keys and command line overrides (in increasing precedence),
    validate the result and turn it into the dataclass of the subcommand.
    """
    if kind not in schemas:
        raise UsageError(f'unknown subcommand {kind!r}')

    document: dict[str, Any] = read_config_file(path) if path is not None else {}
    if kind == 'remote':
        for key, variable in _environment.items():
            if key in document:
                raise UsageError(f'{key} must be given through the environment variable {variable}')
            if os.getenv(variable):
                document[key] = os.environ[variable]
    document.update({k: v for k, v in (overrides or {}).items() if v is not None})

    validator = cerberus.Validator(schemas[kind])
    if not validator.validate(document):
        logger.error('invalid %s config', kind)
        logger.error(validator.errors)
        raise UsageError(f'invalid {kind} config: {validator.errors}')

    config = dataclasses_by_kind[kind](**validator.document)
    if isinstance(config, TrainConfig) and config.m_min > config.m_max:
        raise UsageError(f'invalid train config: m_min={config.m_min} exceeds m_max={config.m_max}')
    logger.info('loaded %s config', kind)
    logger.debug(config)
    return config
