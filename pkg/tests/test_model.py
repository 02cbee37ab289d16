import dataclasses

import pytest
import torch

from simple_mmar.errors import ConfigError
from simple_mmar.mm_data import MultimodalDataset
from simple_mmar.sampling_augment import SamplerConfig
from simple_mmar.tsm_model import (FusionWeights, ModelConfig, ShiftSpec, TemporalShift,
                                   build_model, count_parameters, fuse_logits)


def shift_count(model):
    return sum(isinstance(m, TemporalShift) for m in model.modules())


def test_forward_shape(tiny_model_cfg):
    cfg = dataclasses.replace(tiny_model_cfg, segments=8, num_classes=20)
    model = build_model(cfg).eval()
    with torch.no_grad():
        logits = model(torch.randn(2, 3, 8, 3, 32, 32))
    assert logits.shape == (2, 3, 20)


def test_forward_is_deterministic_in_eval_mode(tiny_model):
    x = torch.randn(1, 3, 4, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(tiny_model(x), tiny_model(x))


def test_initialization_is_seeded(tiny_model_cfg):
    first = build_model(tiny_model_cfg, seed=5).state_dict()
    second = build_model(tiny_model_cfg, seed=5).state_dict()
    assert all(torch.equal(first[key], second[key]) for key in first)


def test_shift_disabled_ignores_segment_order(tiny_model_cfg):
    cfg = dataclasses.replace(tiny_model_cfg, shift=ShiftSpec(enabled=False))
    model = build_model(cfg).double().eval()
    torch.nn.init.normal_(model.head.weight, 0, 1)
    x = torch.randn(2, 3, 4, 3, 32, 32, dtype=torch.float64)
    permuted = x[:, :, [2, 0, 3, 1]]
    with torch.no_grad():
        assert torch.allclose(model(x), model(permuted), atol=1e-5)


def test_shift_enabled_sees_time_reversal(tiny_model_cfg, train_index, tiny_augment):
    model = build_model(tiny_model_cfg).eval()
    torch.nn.init.normal_(model.head.weight, 0, 1)
    dataset = MultimodalDataset(train_index, SamplerConfig(segments=4, mode='center'),
                                tiny_augment, train=False)
    position = train_index.labels().index(2)
    clip, _ = dataset[position]
    with torch.no_grad():
        forward = model(clip[None])
        backward = model(clip.flip(1)[None])
    assert (forward - backward).abs().max() > 1e-6


@pytest.mark.parametrize('preset,blocks', (
    ('deep-50', 16),
    ('deep-101', 33),
))
def test_shift_in_every_residual_block(preset, blocks):
    cfg = ModelConfig(preset=preset, width=0.125, segments=4, num_classes=3)
    assert shift_count(build_model(cfg)) == blocks
    cfg = dataclasses.replace(cfg, shift=ShiftSpec(enabled=False))
    assert shift_count(build_model(cfg)) == 0


def test_mobile_preset():
    cfg = ModelConfig(preset='mobile', width=0.25, segments=4, num_classes=5)
    model = build_model(cfg).eval()
    assert shift_count(model) > 0
    with torch.no_grad():
        assert model(torch.randn(1, 3, 4, 3, 32, 32)).shape == (1, 3, 5)


def test_width_scales_parameter_count():
    narrow = build_model(ModelConfig(width=0.125, num_classes=3))
    wide = build_model(ModelConfig(width=0.25, num_classes=3))
    assert count_parameters(narrow) < count_parameters(wide)
    assert count_parameters(narrow) == sum(p.numel() for p in narrow.parameters())


def test_set_segments(tiny_model):
    with pytest.raises(ValueError, match='segments'):
        tiny_model(torch.randn(1, 3, 8, 3, 32, 32))
    tiny_model.set_segments(8)
    with torch.no_grad():
        assert tiny_model(torch.randn(1, 3, 8, 3, 32, 32)).shape == (1, 3, 3)


@pytest.mark.parametrize('shape', (
    (1, 3, 4, 3, 32),
    (1, 2, 4, 3, 32, 32),
    (1, 3, 4, 1, 32, 32),
))
def test_forward_shape_errors(tiny_model, shape):
    with pytest.raises(ValueError):
        tiny_model(torch.randn(*shape))


def test_fuse_logits():
    logits = torch.randn(4, 3, 6)
    assert torch.equal(fuse_logits(logits, FusionWeights(1.0, 0.0, 0.0)), logits[:, 0])
    weights = FusionWeights()
    expected = logits[:, 0] + logits[:, 1] + 0.2 * logits[:, 2]
    assert torch.allclose(fuse_logits(logits, weights), expected)
    scaled = fuse_logits(logits, FusionWeights(3.0, 3.0, 0.6))
    assert torch.allclose(scaled, 3.0 * fuse_logits(logits, weights), atol=1e-6)
    assert torch.equal(scaled.argmax(dim=1), fuse_logits(logits, weights).argmax(dim=1))


def test_fuse_logits_modality_subset():
    logits = torch.randn(2, 2, 5)
    fused = fuse_logits(logits, FusionWeights(1.0, 1.0, 0.5), ('rgb', 'depth'))
    assert torch.allclose(fused, logits[:, 0] + 0.5 * logits[:, 1])


@pytest.mark.parametrize('weights', ((0.0, 0.0, 0.0), (-1.0, 1.0, 1.0), (1.0, 1.0, 'x')))
def test_fusion_weight_validation(weights):
    with pytest.raises(ConfigError):
        FusionWeights(*weights)


@pytest.mark.parametrize('kwargs', (
    {'preset': 'deep-34'},
    {'width': 0},
    {'num_classes': 1},
    {'modalities': ['rgb', 'rgb']},
    {'modalities': ['audio']},
))
def test_model_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_shift_spec_validation():
    with pytest.raises(ConfigError):
        ShiftSpec(fold_div=0)
    with pytest.raises(ConfigError):
        ShiftSpec(enabled='yes')


def test_config_digest_tracks_architecture_only():
    cfg = ModelConfig()
    assert cfg.digest() == dataclasses.replace(cfg, dropout=0.1).digest()
    assert cfg.digest() == dataclasses.replace(cfg, pretrained='weights.pth').digest()
    assert cfg.digest() != dataclasses.replace(cfg, width=0.5).digest()
    assert cfg.digest() != dataclasses.replace(cfg, preset='deep-101').digest()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
