from pathlib import Path

import pytest
import yaml

from simple_mmar.config import (RUNS_ENV, ExperimentConfig, apply_overrides, load_config,
                                runs_root, write_config)
from simple_mmar.errors import ConfigError


def test_empty_file_is_valid(tmp_path):
    (tmp_path / 'empty.yaml').write_text('')
    cfg = load_config(tmp_path / 'empty.yaml')
    assert cfg == ExperimentConfig()
    assert cfg.model.preset == 'deep-50'
    assert cfg.train.epochs == 30
    assert cfg.train.fusion.alpha == 0.2
    assert load_config() == cfg


def test_unknown_key_names_siblings(tmp_path):
    (tmp_path / 'bad.yaml').write_text('train:\n  epoch: 3\n')
    with pytest.raises(ConfigError) as error:
        load_config(tmp_path / 'bad.yaml')
    message = str(error.value)
    assert '"train.epoch"' in message
    assert 'train.epochs' in message
    assert 'train.lr' in message


def test_nested_unknown_key():
    with pytest.raises(ConfigError, match='model.shift.fold'):
        ExperimentConfig.from_dict({'model': {'shift': {'fold': 4}}})


@pytest.mark.parametrize('text', ('- a\n- b\n', 'train: [1, 2\n'))
def test_malformed_files(tmp_path, text):
    (tmp_path / 'bad.yaml').write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'bad.yaml')


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match='does not exist'):
        load_config(tmp_path / 'missing.yaml')


def test_overrides():
    cfg = load_config(overrides=['train.epochs=2', 'model.segments=4', 'model.width=0.25',
                                 'augment.input_size=64', 'train.fusion.alpha=0.5', 'eval.tta_flip=true'])
    assert cfg.train.epochs == 2
    assert cfg.model.segments == 4
    assert cfg.sampler.segments == 4
    assert cfg.model.width == 0.25
    assert cfg.augment.input_size == 64
    assert cfg.train.fusion.alpha == 0.5
    assert cfg.eval.tta_flip is True


def test_override_errors():
    with pytest.raises(ConfigError, match='section.field=value'):
        apply_overrides({}, ['train.epochs'])
    with pytest.raises(ConfigError, match='not a config section'):
        apply_overrides({'seed': 1}, ['seed.value=2'])
    with pytest.raises(ConfigError, match='train.epochs'):
        load_config(overrides=['train.epochs=many'])
    with pytest.raises(ConfigError, match='unknown config key'):
        load_config(overrides=['model.depth=50'])


def test_overrides_leave_input_untouched():
    data = {'train': {'epochs': 5}}
    assert apply_overrides(data, ['train.epochs=7']) == {'train': {'epochs': 7}}
    assert data == {'train': {'epochs': 5}}


def test_digest_ignores_formatting(tmp_path):
    (tmp_path / 'a.yaml').write_text('train:\n  epochs: 5\n  lr: 0.02\nmodel: {width: 0.5}\n')
    (tmp_path / 'b.yaml').write_text('# same experiment\nmodel:\n    width: 0.50\ntrain: {lr: 0.02, epochs: 5}\n')
    first, second = load_config(tmp_path / 'a.yaml'), load_config(tmp_path / 'b.yaml')
    assert first.digest() == second.digest()
    assert first.digest() != load_config(overrides=['train.epochs=6']).digest()


def test_yaml_round_trip(tmp_path):
    cfg = load_config(overrides=['model.preset=mobile', 'data.channels={tir: 1}', 'eval.passes=2'])
    path = write_config(cfg, tmp_path / 'config.yaml')
    assert ExperimentConfig.from_dict(yaml.safe_load(path.read_text())) == cfg
    assert load_config(path).digest() == cfg.digest()


def test_model_owns_segments():
    with pytest.raises(ConfigError, match='sampler.segments'):
        load_config(overrides=['sampler.segments=4'])
    cfg = load_config(overrides=['sampler.segments=4', 'model.segments=4'])
    assert cfg.sampler.segments == 4


def test_written_config_accepts_new_segment_count(tmp_path):
    path = write_config(load_config(), tmp_path / 'config.yaml')
    assert 'segments' not in yaml.safe_load(path.read_text())['sampler']
    cfg = load_config(path, overrides=['model.segments=16'])
    assert cfg.model.segments == 16
    assert cfg.sampler.segments == 16


def test_modalities_follow_data_section():
    cfg = load_config(overrides=['data.modalities=[rgb, depth]'])
    assert cfg.model.modalities == ['rgb', 'depth']
    with pytest.raises(ConfigError, match='modalities'):
        load_config(overrides=['data.modalities=[rgb, depth]', 'model.modalities=[rgb]'])


def test_resolved_sections():
    cfg = load_config(overrides=['seed=7'])
    assert cfg.resolved_train().seed == 7
    assert cfg.resolved_augment().std == [0.5, 0.5, 0.5]
    assert cfg.with_classes(3).model.num_classes == 3
    assert cfg.with_classes(20) is cfg


def test_runs_root(monkeypatch, tmp_path):
    monkeypatch.delenv(RUNS_ENV, raising=False)
    assert runs_root() == Path('runs')
    monkeypatch.setenv(RUNS_ENV, str(tmp_path / 'env'))
    assert runs_root() == tmp_path / 'env'
    assert runs_root(str(tmp_path / 'flag')) == tmp_path / 'flag'
