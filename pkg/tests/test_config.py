from pathlib import Path

import pytest

from config import (DEFAULT_GRAMMAR_FILE, CvaeConfig, PipelineConfig, config_hash, load_environment,
                    load_pipeline_config)
from exceptions import ConfigError


def test_defaults():
    config = load_pipeline_config()

    assert config.bin_policy == 'auto'
    assert config.grammar_file == DEFAULT_GRAMMAR_FILE
    assert config.cvae == CvaeConfig()
    assert config.cvae.n_measures == 8


def test_file_values_and_cvae_prefix(tmp_path):
    path = tmp_path / 'run.env'
    path.write_text('BIN_POLICY=half\nEXCLUDE_MELODY=yes\nSIGMA=0.5\nSEED=7\nCVAE_LATENT_DIM=32\n'
                    'CVAE_LEARNING_RATE=0.01\n')

    config = load_pipeline_config(path)

    assert config.bin_policy == 'half'
    assert config.exclude_melody is True
    assert config.sigma == 0.5
    assert config.seed == 7
    assert config.cvae.latent_dim == 32
    assert config.cvae.learning_rate == 0.01


def test_overrides_win_and_none_is_ignored(tmp_path):
    path = tmp_path / 'run.env'
    path.write_text('BIN_POLICY=half\n')

    config = load_pipeline_config(path, {'bin_policy': 'two', 'seed': None, 'cvae_steps': 5})

    assert config.bin_policy == 'two'
    assert config.seed == 0
    assert config.cvae.steps == 5


@pytest.mark.parametrize('text', ['COLOUR=blue\n', 'CVAE_DEPTH=3\n', 'BIN_POLICY=quarter\n', 'SEED=many\n',
                                  'SIGMA=-1\n', 'CVAE_LATENT_DIM=0\n', 'GRAMMAR_FILE=/no/such/file.tgg\n'])
def test_invalid_files(tmp_path, text):
    path = tmp_path / 'run.env'
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_pipeline_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_pipeline_config(tmp_path / 'missing.env')


def test_provenance_hash_tracks_config():
    base = PipelineConfig()
    changed = PipelineConfig(sigma=0.3)

    assert base.provenance()['config_hash'] == PipelineConfig().provenance()['config_hash']
    assert base.provenance()['config_hash'] != changed.provenance()['config_hash']
    assert changed.provenance()['sigma'] == 0.3


def test_config_hash_ignores_key_order():
    assert config_hash({'a': 1, 'b': Path('x')}) == config_hash({'b': 'x', 'a': 1})
    assert len(config_hash({})) == 64


def test_environment(monkeypatch):
    monkeypatch.setenv('POPCOMPOSER_WORKERS', '4')
    monkeypatch.setenv('POPCOMPOSER_LOG_LEVEL', 'debug')

    assert load_environment() == {'workers': 4, 'log_level': 'DEBUG'}


@pytest.mark.parametrize('workers', ['many', '0', '-3'])
def test_bad_worker_count(monkeypatch, workers):
    monkeypatch.setenv('POPCOMPOSER_WORKERS', workers)
    with pytest.raises(ConfigError):
        load_environment()
