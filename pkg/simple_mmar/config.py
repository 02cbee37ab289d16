"""
Experiment configuration: a tree of dataclasses read from YAML.

Every field has a default, so an empty file is a valid config. Overrides use
dotted paths (``train.epochs=2``) with YAML scalar parsing of the value.
"""
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import yaml

from simple_mmar.errors import ConfigError
from simple_mmar.mm_data import MODALITIES, resolve_channels
from simple_mmar.sampling_augment import AugmentConfig, SamplerConfig
from simple_mmar.scoring import EvalConfig
from simple_mmar.training import TrainConfig
from simple_mmar.tsm_model import ModelConfig
from simple_mmar.utils import build_dataclass, check_float_in_range, check_int_in_range

LOGGER = logging.getLogger(__name__)

RUNS_ENV = 'SIMPLE_MMAR_RUNS'
DEFAULT_RUNS = 'runs'


@dataclass
class DataConfig:
    """
    :param root: dataset directory holding index.json
    :param modalities: modalities read from every clip, in model order
    :param channels: {modality: 1 or 3} for TIR/DEPTH
    :param val_fraction: stratified share of training clips held out for validation
    """
    root: str = 'data'
    modalities: List[str] = field(default_factory=lambda: list(MODALITIES))
    channels: Dict[str, int] = field(default_factory=dict)
    val_fraction: float = 0.1

    def __post_init__(self):
        self.modalities = list(self.modalities)
        try:
            resolve_channels(self.modalities, self.channels)
        except ValueError as exc:
            raise ConfigError('data: {}'.format(exc))
        self.val_fraction = check_float_in_range(self.val_fraction, 'data.val_fraction', 0.0, 0.9)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        check_int_in_range(self.seed, 'seed', 0, None)
        if list(self.model.modalities) != list(self.data.modalities):
            raise ConfigError('model.modalities {} must equal data.modalities {}'
                              .format(self.model.modalities, self.data.modalities))
        # the model owns the segment count
        if self.sampler.segments != self.model.segments:
            self.sampler = dataclasses.replace(self.sampler, segments=self.model.segments)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        model = data.get('model') or {}
        sampler = data.get('sampler') or {}
        if isinstance(model, dict) and isinstance(sampler, dict) and 'segments' in sampler:
            if sampler['segments'] != model.get('segments', ModelConfig.segments):
                raise ConfigError('sampler.segments must equal model.segments')
        if isinstance(model, dict) and 'modalities' not in model:
            data_section = data.get('data') or {}
            if isinstance(data_section, dict) and 'modalities' in data_section:
                data['model'] = dict(model, modalities=data_section['modalities'])
        return build_dataclass(cls, data)

    def to_dict(self):
        """Plain dict form; sampler.segments is left out because model.segments owns it."""
        data = dataclasses.asdict(self)
        del data['sampler']['segments']
        return data

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), default_flow_style=False, sort_keys=True)

    def digest(self):
        """sha256 of the canonical JSON form; formatting of the source file does not matter."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def with_classes(self, num_classes):
        if num_classes == self.model.num_classes:
            return self
        LOGGER.info('model.num_classes set to %d from the dataset', num_classes)
        return dataclasses.replace(self, model=dataclasses.replace(self.model, num_classes=num_classes))

    def resolved_augment(self):
        return self.augment.resolved(self.model.pretrained is not None)

    def resolved_train(self):
        if self.train.seed is not None:
            return self.train
        return dataclasses.replace(self.train, seed=self.seed)


def apply_overrides(data, overrides):
    """
    Apply ``section.field=value`` overrides to a plain config dict.

    :param data: dict (modified copy returned)
    :param overrides: iterable of strings
    """
    data = json.loads(json.dumps(data or {}))
    for override in overrides or ():
        if '=' not in override:
            raise ConfigError('override "{}" must look like section.field=value'.format(override))
        key, raw = override.split('=', 1)
        parts = [part for part in key.strip().split('.') if part]
        if not parts:
            raise ConfigError('override "{}" has an empty key'.format(override))
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError('cannot parse value of override "{}": {}'.format(override, exc))
        node = data
        for depth, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError('"{}" is not a config section'.format('.'.join(parts[:depth + 1])))
            node = child
        node[parts[-1]] = value
    return data


def read_yaml(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError('config file {} does not exist'.format(path))
    try:
        with open(path) as source:
            data = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        raise ConfigError('cannot parse {}: {}'.format(path, exc))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError('{} must hold a mapping at the top level'.format(path))
    return data


def load_config(path=None, overrides=()):
    """
    Build an ExperimentConfig from an optional YAML file and overrides.
    """
    data = read_yaml(path) if path else {}
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


def write_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_yaml())
    return path


def runs_root(flag=None):
    """``--runs`` flag, else the SIMPLE_MMAR_RUNS environment variable, else ./runs."""
    return Path(flag or os.environ.get(RUNS_ENV) or DEFAULT_RUNS)
