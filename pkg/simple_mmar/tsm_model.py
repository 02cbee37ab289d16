"""
Temporal shift and the segment-based 2D-CNN with per-modality logits.

Modalities are folded into the frame axis and run through one shared
backbone; the head emits one K-vector per modality, which are fused with the
weights (gamma, beta, alpha) of the RGB, TIR and DEPTH logits.
"""
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import requests
import torch
import torch.nn as nn
from torchvision.models.mobilenetv2 import InvertedResidual, MobileNetV2
from torchvision.models.resnet import Bottleneck, conv1x1

from simple_mmar.errors import CheckpointError, ConfigError
from simple_mmar.utils import (build_dataclass, check_float_in_range, check_int_in_range,
                               check_value_in_list)

LOGGER = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'simple_mmar-checkpoint-1'
MODALITY_ORDER = ('rgb', 'tir', 'depth')
RESIDUAL_LAYERS = {
    'deep-50': (3, 4, 6, 3),
    'deep-101': (3, 4, 23, 3),
}
PRESETS = tuple(RESIDUAL_LAYERS) + ('mobile',)


@dataclass
class ShiftSpec:
    """
    :param enabled: insert temporal shift into the residual branches
    :param fold_div: C/fold_div channels move backward in time, C/fold_div forward
    """
    enabled: bool = True
    fold_div: int = 8

    def __post_init__(self):
        check_value_in_list(self.enabled, 'model.shift.enabled', (True, False))
        check_int_in_range(self.fold_div, 'model.shift.fold_div', 1, 1024)


@dataclass
class FusionWeights:
    """Weights of the RGB (gamma), TIR (beta) and DEPTH (alpha) logits."""
    gamma: float = 1.0
    beta: float = 1.0
    alpha: float = 0.2

    def __post_init__(self):
        for name in ('gamma', 'beta', 'alpha'):
            setattr(self, name, check_float_in_range(getattr(self, name), 'fusion.' + name, 0.0))
        if not (self.gamma > 0 or self.beta > 0 or self.alpha > 0):
            raise ConfigError('at least one fusion weight must be strictly positive')

    def vector(self, modalities=MODALITY_ORDER):
        by_modality = {'rgb': self.gamma, 'tir': self.beta, 'depth': self.alpha}
        return [by_modality[m] for m in modalities]


@dataclass
class ModelConfig:
    """
    :param preset: 'deep-50', 'deep-101' or 'mobile'
    :param width: channel multiplier of the backbone (1.0 = reference width)
    :param segments: frames per clip S
    :param shift: ShiftSpec
    :param num_classes: K
    :param modalities: modality order of the logits
    :param dropout: dropout before the head
    :param pretrained: optional backbone checkpoint file or http(s) URL
    """
    preset: str = 'deep-50'
    width: float = 1.0
    segments: int = 8
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    num_classes: int = 20
    modalities: List[str] = field(default_factory=lambda: list(MODALITY_ORDER))
    dropout: float = 0.5
    pretrained: Optional[str] = None

    def __post_init__(self):
        check_value_in_list(self.preset, 'model.preset', PRESETS)
        self.width = check_float_in_range(self.width, 'model.width', 0.0, 8.0, min_inclusive=False)
        check_int_in_range(self.segments, 'model.segments', 1, 256)
        check_int_in_range(self.num_classes, 'model.num_classes', 2, 100000)
        self.modalities = list(self.modalities)
        if not self.modalities or len(set(self.modalities)) != len(self.modalities):
            raise ConfigError('model.modalities must be a non-empty list without repeats')
        for modality in self.modalities:
            check_value_in_list(modality, 'model.modalities', MODALITY_ORDER)
        self.dropout = check_float_in_range(self.dropout, 'model.dropout', 0.0, 0.99)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return build_dataclass(cls, data, 'model')

    def digest(self):
        """Architecture hash: equal iff parameter sets are interchangeable."""
        identity = self.to_dict()
        identity.pop('dropout')
        identity.pop('pretrained')
        canonical = json.dumps(identity, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def temporal_shift(x, n_segment, fold_div=8):
    """
    Shift part of the channels one step along time, zero padded.

    Channels [0, C/d) take the next frame's values, channels [C/d, 2C/d) the
    previous frame's, the rest are copied unchanged.

    :param x: tensor (N*S, C, ...)
    :param n_segment: S
    :param fold_div: d
    :return: tensor of the same shape
    """
    nt, channels = x.shape[0], x.shape[1]
    if n_segment < 1 or nt % n_segment:
        raise ValueError('leading dimension {} must be divisible by segments {}'.format(nt, n_segment))
    fold = channels // fold_div
    if 2 * fold > channels:
        raise ValueError('2 * C / fold_div must not exceed C (C={}, fold_div={})'
                         .format(channels, fold_div))
    x = x.view(nt // n_segment, n_segment, *x.shape[1:])
    out = torch.zeros_like(x)
    out[:, :-1, :fold] = x[:, 1:, :fold]  # shift future frames
    out[:, 1:, fold: 2 * fold] = x[:, :-1, fold: 2 * fold]  # shift past frames
    out[:, :, 2 * fold:] = x[:, :, 2 * fold:]
    return out.view(nt, *x.shape[2:])


class TemporalShift(nn.Module):
    """Applies :func:`temporal_shift` to the input of ``net``."""

    def __init__(self, net, n_segment=8, fold_div=8):
        super(TemporalShift, self).__init__()
        self.net = net
        self.n_segment = n_segment
        self.fold_div = fold_div

    def forward(self, x):
        return self.net(temporal_shift(x, self.n_segment, self.fold_div))


class ResidualTrunk(nn.Module):
    """Bottleneck residual 2D-CNN with torchvision-compatible parameter names."""

    def __init__(self, layers, width=1.0):
        super(ResidualTrunk, self).__init__()
        base = max(8, int(round(64 * width)))
        self.inplanes = base
        self.conv1 = nn.Conv2d(3, base, kernel_size=7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(base)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(kernel_size=3, stride=2, padding=1)
        self.layer1 = self._make_layer(base, layers[0])
        self.layer2 = self._make_layer(base * 2, layers[1], stride=2)
        self.layer3 = self._make_layer(base * 4, layers[2], stride=2)
        self.layer4 = self._make_layer(base * 8, layers[3], stride=2)
        self.feature_dim = base * 8 * Bottleneck.expansion

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode='fan_out', nonlinearity='relu')
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1)
                nn.init.constant_(m.bias, 0)

    def _make_layer(self, planes, blocks, stride=1):
        downsample = None
        if stride != 1 or self.inplanes != planes * Bottleneck.expansion:
            downsample = nn.Sequential(
                conv1x1(self.inplanes, planes * Bottleneck.expansion, stride),
                nn.BatchNorm2d(planes * Bottleneck.expansion),
            )
        layers = [Bottleneck(self.inplanes, planes, stride, downsample)]
        self.inplanes = planes * Bottleneck.expansion
        for _ in range(1, blocks):
            layers.append(Bottleneck(self.inplanes, planes))
        return nn.Sequential(*layers)

    def residual_blocks(self):
        for stage in (self.layer1, self.layer2, self.layer3, self.layer4):
            for block in stage:
                yield block

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))


def _build_backbone(cfg):
    if cfg.preset == 'mobile':
        net = MobileNetV2(width_mult=cfg.width)
        return net.features, net.last_channel
    trunk = ResidualTrunk(RESIDUAL_LAYERS[cfg.preset], cfg.width)
    return trunk, trunk.feature_dim


def insert_temporal_shift(backbone, preset, n_segment, fold_div):
    """
    Wrap the first convolution of every residual branch with TemporalShift.

    The identity path stays unshifted. Returns the inserted modules.
    """
    inserted = []
    if preset == 'mobile':
        for block in backbone:
            if isinstance(block, InvertedResidual) and block.use_res_connect:
                block.conv[0] = TemporalShift(block.conv[0], n_segment, fold_div)
                inserted.append(block.conv[0])
    else:
        for block in backbone.residual_blocks():
            block.conv1 = TemporalShift(block.conv1, n_segment, fold_div)
            inserted.append(block.conv1)
    LOGGER.debug('inserted %d temporal shift modules (fold_div=%d)', len(inserted), fold_div)
    return inserted


class TsmModel(nn.Module):
    """
    Segment-based 2D-CNN over concatenated modality stacks.

    Input (B, M, S, 3, H, W) -> logits (B, M, K).
    """

    def __init__(self, cfg):
        super(TsmModel, self).__init__()
        self.cfg = cfg
        self.modalities = tuple(cfg.modalities)
        self.segments = cfg.segments
        self.backbone, feature_dim = _build_backbone(cfg)
        self.shift_modules = []
        if cfg.shift.enabled:
            self.shift_modules = insert_temporal_shift(self.backbone, cfg.preset,
                                                       cfg.segments, cfg.shift.fold_div)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(p=cfg.dropout)
        self.head = nn.Linear(feature_dim, len(self.modalities) * cfg.num_classes)
        nn.init.normal_(self.head.weight, 0, 0.001)
        nn.init.constant_(self.head.bias, 0)

    @property
    def num_classes(self):
        return self.cfg.num_classes

    def set_segments(self, segments):
        """Re-target the model to S segments (consensus is a mean over any S)."""
        check_int_in_range(segments, 'segments', 1, 256)
        self.segments = segments
        for module in self.shift_modules:
            module.n_segment = segments

    def forward(self, x):
        if x.dim() != 6:
            raise ValueError('input must have shape (B, M, S, C, H, W), got {}'.format(tuple(x.shape)))
        batch, modalities, segments, channels, height, width = x.shape
        if modalities != len(self.modalities):
            raise ValueError('expected {} modalities, got {}'.format(len(self.modalities), modalities))
        if segments != self.segments:
            raise ValueError('expected {} segments, got {}'.format(self.segments, segments))
        if channels != 3:
            raise ValueError('expected 3 channels per frame, got {}'.format(channels))
        features = self.backbone(x.reshape(batch * modalities * segments, channels, height, width))
        features = self.pool(features).flatten(1)
        # consensus over segments
        features = features.view(batch, modalities, segments, -1).mean(dim=2)
        logits = self.head(self.dropout(features))
        logits = logits.view(batch, modalities, modalities, self.cfg.num_classes)
        own = torch.arange(modalities, device=logits.device)
        return logits[:, own, own]


def fuse_logits(logits, weights, modalities=MODALITY_ORDER):
    """
    gamma * L_rgb + beta * L_tir + alpha * L_depth

    :param logits: tensor (B, M, K)
    :param weights: FusionWeights
    :param modalities: modality order of the M axis
    :return: tensor (B, K)
    """
    vector = torch.tensor(weights.vector(modalities), dtype=logits.dtype, device=logits.device)
    return (logits * vector.view(1, -1, 1)).sum(dim=1)


def build_model(cfg, seed=0):
    """Deterministically initialized TsmModel, pretrained backbone loaded when configured."""
    torch.manual_seed(seed)
    model = TsmModel(cfg)
    if cfg.pretrained:
        load_pretrained_backbone(model, cfg.pretrained)
    LOGGER.info('built %s (width %.3g, %d segments, shift %s) with %d parameters',
                cfg.preset, cfg.width, cfg.segments,
                'd={}'.format(cfg.shift.fold_div) if cfg.shift.enabled else 'off',
                count_parameters(model))
    return model


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def _torch_load(source):
    return torch.load(source, map_location='cpu', weights_only=True)


def fetch_state(path_or_url, timeout=60):
    """
    Read a torch checkpoint from a file or an http(s) URL.
    """
    location = str(path_or_url)
    if location.startswith(('http://', 'https://')):
        response = requests.get(location, timeout=timeout)
        if response.status_code != 200:
            raise CheckpointError('Expected status_code 200, received {} for {}'
                                  .format(response.status_code, location))
        return _torch_load(io.BytesIO(response.content))
    if not Path(location).is_file():
        raise CheckpointError('checkpoint {} does not exist'.format(location))
    try:
        return _torch_load(location)
    except Exception as exc:
        raise CheckpointError('cannot read checkpoint {}: {}'.format(location, exc))


def _plain_key(key):
    for prefix in ('module.', 'base_model.', 'backbone.', 'features.'):
        if key.startswith(prefix):
            key = key[len(prefix):]
    return key.replace('.net.', '.')


def load_pretrained_backbone(model, path_or_url):
    """
    Load an external torchvision-style backbone (no head).

    Head keys are dropped and the head keeps its fresh initialization. A stem
    whose input-channel count differs is averaged over input channels and
    replicated to 3.

    :return: number of backbone tensors loaded
    """
    state = fetch_state(path_or_url)
    if isinstance(state, dict) and 'state_dict' in state:
        state = state['state_dict']
    external = {_plain_key(k): v for k, v in state.items()
                if not k.split('.')[-2:-1] == ['fc'] and not k.startswith(('fc.', 'classifier.'))}
    own = model.backbone.state_dict()
    loaded = {}
    for key, target in own.items():
        source = external.get(_plain_key(key))
        if source is None:
            continue
        if source.shape != target.shape:
            if (source.dim() == 4 and source.shape[0] == target.shape[0]
                    and source.shape[2:] == target.shape[2:]):
                LOGGER.info('adapted stem %s from %d to %d input channels',
                            key, source.shape[1], target.shape[1])
                source = source.mean(dim=1, keepdim=True).repeat(1, target.shape[1], 1, 1)
            else:
                raise CheckpointError('pretrained tensor {} has shape {}, model expects {}'
                                      .format(key, tuple(source.shape), tuple(target.shape)))
        loaded[key] = source.to(target.dtype)
    if not loaded:
        raise CheckpointError('no backbone tensors of {} match the model'.format(path_or_url))
    missing = [k for k in own if k not in loaded]
    model.backbone.load_state_dict(loaded, strict=False)
    LOGGER.info('loaded %d pretrained backbone tensors from %s (%d left at init)',
                len(loaded), path_or_url, len(missing))
    return len(loaded)


def save_checkpoint(model, path, score=None, epoch=None, extra=None):
    """
    Write a self-describing checkpoint: format tag, architecture hash and
    config, epoch, validation score and the named parameter tensors.
    """
    payload = {
        'format': CHECKPOINT_FORMAT,
        'config_hash': model.cfg.digest(),
        'model_config': model.cfg.to_dict(),
        'epoch': epoch,
        'score': score,
        'state_dict': {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        'extra': extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, str(path))
    LOGGER.debug('saved checkpoint %s (epoch %s, score %s)', path, epoch, score)
    return path


def read_checkpoint(path):
    payload = fetch_state(path)
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError('{} is not a simple_mmar checkpoint'.format(path))
    return payload


def load_checkpoint(path, cfg=None):
    """
    Rebuild a model from a checkpoint.

    :param path: checkpoint file
    :param cfg: expected ModelConfig; a different architecture hash is refused
    :return: (TsmModel in eval mode, checkpoint payload)
    """
    payload = read_checkpoint(path)
    stored = ModelConfig.from_dict(payload['model_config'])
    if cfg is not None and cfg.digest() != payload['config_hash']:
        raise CheckpointError(
            'config hash mismatch for {}: checkpoint was written by a {} model '
            '(hash {}), the requested config is {} (hash {}); parameter sets of '
            'different architectures cannot be mixed'.format(
                path, stored.preset, payload['config_hash'][:12], cfg.preset, cfg.digest()[:12]))
    if cfg is not None:
        stored = dataclasses.replace(cfg, pretrained=None)
    else:
        stored = dataclasses.replace(stored, pretrained=None)
    model = TsmModel(stored)
    model.load_state_dict(payload['state_dict'])
    model.eval()
    return model, payload
