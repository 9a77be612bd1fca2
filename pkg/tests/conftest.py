import functools
from pathlib import Path

import numpy as np
import pytest

from task_superposition import events
from task_superposition.config import load_config
from task_superposition.model.taskgen import VOCAB
from task_superposition.model.training import TrainResult, train
from task_superposition.model.transformer import TransformerConfig, init_weights


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> TransformerConfig:
    return TransformerConfig(
        n_layers=2, n_heads=2, d_model=8, d_mlp=16, vocab_size=len(VOCAB), max_seq_len=160,
    )


@pytest.fixture
def tiny_weights(tiny_config, rng):
    return init_weights(tiny_config, rng, std=0.3)


@pytest.fixture(autouse=True)
def clean_progress_handlers():
    """tests subscribing to progress events must not leak their handlers"""
    handlers = list(events.progress._global_handlers)
    yield
    events.progress._global_handlers[:] = handlers


CONFIGS = Path(__file__).parent.parent / 'configs'


@pytest.fixture(scope='session')
def desk_model():
    """trains the desk model of a task family at the settings of configs/<family>.cfg, once per session"""
    @functools.cache
    def train_family(family: str) -> TrainResult:
        config = load_config('train', CONFIGS / f'{family}.cfg', {'seed': 7})
        return train(config, evaluate=False)
    return train_family
