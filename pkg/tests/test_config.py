import pytest

from task_superposition.config import ConstructConfig, RemoteConfig, TrainConfig, load_config, schemas
from task_superposition.errors import UsageError


def test_defaults():
    config = load_config('construct')
    assert isinstance(config, ConstructConfig)
    assert (config.tasks, config.n, config.m, config.C, config.C_threshold) == ('copy1,copy2,copy3', 4, 24, 30.0, 20.0)
    assert config.seed == 0


def test_seed_is_required_for_sampling_subcommands():
    for kind in ('train', 'probe', 'remote'):
        with pytest.raises(UsageError):
            load_config(kind)
    assert load_config('train', overrides={'seed': 3}).seed == 3


def test_file_and_overrides(tmp_path):
    path = tmp_path / 'train.cfg'
    path.write_text('family = "retrieval"\nsteps = 50\nlearning_rate = 1\n', encoding='utf-8')
    config = load_config('train', path, {'seed': 1, 'steps': 7, 'batch_size': None})
    assert isinstance(config, TrainConfig)
    assert config.family == 'retrieval'
    assert config.steps == 7
    assert config.batch_size == 32
    assert config.learning_rate == 1.0 and isinstance(config.learning_rate, float)


@pytest.mark.parametrize('document', [
    'family = "poetry"\n',
    'steps = 0\n',
    'unknown_key = 1\n',
    'steps = "many"\n',
])
def test_invalid_values(tmp_path, document):
    path = tmp_path / 'train.cfg'
    path.write_text(document, encoding='utf-8')
    with pytest.raises(UsageError):
        load_config('train', path, {'seed': 1})


def test_unreadable_files(tmp_path):
    broken = tmp_path / 'broken.cfg'
    broken.write_text('steps = = 3\n', encoding='utf-8')
    with pytest.raises(UsageError):
        load_config('train', broken, {'seed': 1})
    with pytest.raises(UsageError):
        load_config('train', tmp_path / 'missing.cfg', {'seed': 1})
    with pytest.raises(UsageError):
        load_config('deploy')


def test_remote_credentials_come_from_the_environment(tmp_path, monkeypatch):
    monkeypatch.setenv('SUPERPOSITION_API_URL', 'https://api.example.test/v1')
    monkeypatch.setenv('SUPERPOSITION_API_KEY', 'secret')
    monkeypatch.delenv('SUPERPOSITION_API_MODEL', raising=False)
    config = load_config('remote', overrides={'seed': 0})
    assert isinstance(config, RemoteConfig)
    assert (config.url, config.api_key, config.model) == ('https://api.example.test/v1', 'secret', '')

    path = tmp_path / 'remote.cfg'
    path.write_text('api_key = "in a file"\n', encoding='utf-8')
    with pytest.raises(UsageError):
        load_config('remote', path, {'seed': 0})


def test_every_schema_has_a_seed():
    assert all('seed' in schema for schema in schemas.values())


def test_training_example_range(tmp_path):
    config = load_config('train', overrides={'seed': 0})
    assert (config.m_min, config.m_max, config.eval_m) == (4, 16, 20)

    path = tmp_path / 'train.cfg'
    path.write_text('m_min = 9\nm_max = 8\n', encoding='utf-8')
    with pytest.raises(UsageError, match='m_min'):
        load_config('train', path, {'seed': 0})
    assert load_config('train', path, {'seed': 0, 'm_max': 9}).m_max == 9
