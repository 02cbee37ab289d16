import json
import logging
import shutil

import numpy as np
import pytest
import torch

from simple_mmar.errors import ConfigError, DatasetError
from simple_mmar.mm_data import (INDEX_FILE, MODALITIES, ModalityKind, MultimodalDataset,
                                 gen_synthetic, load_index, read_clip, stack_modalities,
                                 stratified_split, stretch_indices)
from simple_mmar.sampling_augment import SamplerConfig
from simple_mmar.utils import save_frame


def write_dataset(root, clips, classes=20, extensions=None):
    """Hand-written dataset: clips is a list of (clip_id, label, {modality: frame count})."""
    entries = []
    for clip_id, label, counts in clips:
        frames = max(counts.values())
        for modality, count in counts.items():
            directory = root / 'clips' / clip_id / modality
            directory.mkdir(parents=True, exist_ok=True)
            for number in range(1, count + 1):
                value = np.full((6, 8, 3), number * 10, dtype=np.uint8)
                save_frame(value, directory / 'img_{:05d}.png'.format(number))
        entry = {'id': clip_id, 'label': label, 'frames': frames,
                 'modalities': {m: 'clips/{}/{}'.format(clip_id, m) for m in counts}}
        short = {m: c for m, c in counts.items() if c != frames}
        if short:
            entry['modality_frames'] = short
        entries.append(entry)
    index = {'classes': ['c{}'.format(i) for i in range(classes)], 'clips': entries}
    if extensions:
        index['extensions'] = extensions
    (root / INDEX_FILE).write_text(json.dumps(index))
    return root


FULL = {'rgb': 4, 'tir': 4, 'depth': 4}


def test_modality_kinds():
    assert MODALITIES == ('rgb', 'tir', 'depth')
    assert [kind.label for kind in ModalityKind] == ['RGB', 'TIR', 'DEPTH']


def test_load_index_enumerates_clips(tmp_path):
    write_dataset(tmp_path, [('v{}'.format(i), i, FULL) for i in range(4)])
    index = load_index(tmp_path)
    assert len(index) == 4
    assert index.num_classes == 20
    assert index.labels() == [0, 1, 2, 3]
    assert index.clips[0].frame_path('tir', 2).name == 'img_00002.png'


def test_load_index_names_clip_and_missing_modality(tmp_path):
    write_dataset(tmp_path, [('v0', 0, FULL), ('v3', 1, FULL)])
    shutil.rmtree(str(tmp_path / 'clips' / 'v3' / 'depth'))
    with pytest.raises(DatasetError) as error:
        load_index(tmp_path)
    assert 'v3' in str(error.value)
    assert 'DEPTH' in str(error.value)


def test_load_index_rejects_clip_without_modality_entry(tmp_path):
    write_dataset(tmp_path, [('v3', 0, {'rgb': 4, 'tir': 4})])
    with pytest.raises(DatasetError, match='v3.*DEPTH'):
        load_index(tmp_path)
    assert len(load_index(tmp_path, modalities=('rgb', 'tir'))) == 1


def test_load_index_errors(tmp_path):
    with pytest.raises(DatasetError, match='missing index'):
        load_index(tmp_path)

    write_dataset(tmp_path, [('v0', 20, FULL)])
    with pytest.raises(DatasetError, match='label'):
        load_index(tmp_path)

    write_dataset(tmp_path, [('v0', 0, FULL), ('v0', 1, FULL)])
    with pytest.raises(DatasetError, match='duplicate'):
        load_index(tmp_path)

    (tmp_path / INDEX_FILE).write_text('{not json')
    with pytest.raises(DatasetError, match='cannot parse'):
        load_index(tmp_path)


def test_load_index_split_filter(tmp_path):
    write_dataset(tmp_path, [('v0', 0, FULL), ('v1', 1, FULL)])
    index = json.loads((tmp_path / INDEX_FILE).read_text())
    index['clips'][1]['split'] = 'test'
    (tmp_path / INDEX_FILE).write_text(json.dumps(index))
    assert [c.clip_id for c in load_index(tmp_path, 'train').clips] == ['v0']
    assert [c.clip_id for c in load_index(tmp_path, 'test').clips] == ['v1']


def test_read_clip_stretches_short_modality(tmp_path):
    write_dataset(tmp_path, [('v0', 0, {'rgb': 16, 'tir': 12, 'depth': 16})])
    clip = load_index(tmp_path).clips[0]
    frames = read_clip(clip)
    assert {m: s.shape[0] for m, s in frames.items()} == {'rgb': 16, 'tir': 16, 'depth': 16}
    mapping = [i * 12 // 16 for i in range(16)]
    assert stretch_indices(12, 16) == mapping
    assert [int(frame[0, 0, 0]) // 10 - 1 for frame in frames['tir']] == mapping
    assert np.array_equal(frames['rgb'][:, 0, 0, 0], (np.arange(16) + 1) * 10)


def test_stretch_indices_is_monotone():
    for source in range(1, 20):
        for target in range(source, 25):
            mapping = stretch_indices(source, target)
            assert mapping == sorted(mapping)
            assert mapping[0] == 0
            assert mapping[-1] == source - 1


def test_read_clip_black_frames(tmp_path):
    write_dataset(tmp_path, [('v0', 0, FULL)])
    clip = load_index(tmp_path).clips[0]
    for modality in MODALITIES:
        save_frame(np.zeros((6, 8, 3), dtype=np.uint8), clip.frame_path(modality, 1))
    frames = read_clip(clip)
    for modality in MODALITIES:
        assert not frames[modality][0].any()
        assert frames[modality].dtype == np.uint8


def test_read_clip_names_corrupt_file(tmp_path):
    write_dataset(tmp_path, [('v0', 0, FULL)])
    clip = load_index(tmp_path).clips[0]
    clip.frame_path('depth', 3).write_bytes(b'not an image')
    with pytest.raises(DatasetError, match='img_00003.png'):
        read_clip(clip)


def test_single_channel_modalities(tmp_path):
    write_dataset(tmp_path, [('v0', 0, FULL)])
    index = load_index(tmp_path, channels={'tir': 1, 'depth': 1})
    frames = read_clip(index.clips[0])
    assert frames['rgb'].shape[-1] == 3
    assert frames['depth'].shape[-1] == 1
    with pytest.raises(DatasetError):
        load_index(tmp_path, channels={'tir': 2})


def test_stack_modalities_replicates_single_channel():
    stacks = {'rgb': np.zeros((4, 8, 8, 3), dtype=np.float32),
              'depth': np.ones((4, 8, 8, 1), dtype=np.float32)}
    tensor = stack_modalities(stacks, ('rgb', 'depth'))
    assert tensor.shape == (2, 4, 3, 8, 8)
    assert torch.equal(tensor[1], torch.ones(4, 3, 8, 8))
    with pytest.raises(ValueError):
        stack_modalities({'rgb': np.zeros((4, 8, 8, 3)), 'tir': np.zeros((3, 8, 8, 3))}, ('rgb', 'tir'))


def test_gen_synthetic_counts(tmp_path):
    root = gen_synthetic(tmp_path / 'data', n_clips=30, classes=3, frames=16, size=64, seed=7)
    index = load_index(root)
    assert len(index) == 30
    assert index.num_classes == 3
    assert sorted(set(index.labels())) == [0, 1, 2]
    clip = index.clips[0]
    assert clip.frames == 16
    for modality in MODALITIES:
        assert len(list((root / 'clips' / clip.clip_id / modality).glob('*.png'))) == 16
    frames = read_clip(clip)
    assert frames['rgb'].shape == (16, 64, 64, 3)


def test_gen_synthetic_is_byte_identical(tmp_path):
    first = gen_synthetic(tmp_path / 'a', n_clips=3, classes=3, frames=8, size=32, seed=7)
    second = gen_synthetic(tmp_path / 'b', n_clips=3, classes=3, frames=8, size=32, seed=7)
    files = sorted(p.relative_to(first) for p in first.rglob('*') if p.is_file())
    assert files == sorted(p.relative_to(second) for p in second.rglob('*') if p.is_file())
    for name in files:
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_gen_synthetic_validation(tmp_path):
    for kwargs in ({'classes': 1}, {'classes': 9}, {'frames': 7}, {'size': 16}, {'n_clips': 0}):
        with pytest.raises(ConfigError):
            gen_synthetic(tmp_path / 'bad', **kwargs)
    root = gen_synthetic(tmp_path / 'data', n_clips=2, classes=2, frames=8, size=32)
    with pytest.raises(DatasetError, match='refusing'):
        gen_synthetic(root, n_clips=2, classes=2, frames=8, size=32)
    gen_synthetic(root, n_clips=2, classes=2, frames=8, size=32, overwrite=True)


def test_gen_synthetic_warns_on_mirrored_classes(tmp_path, caplog):
    caplog.set_level(logging.WARNING, logger='simple_mmar')
    gen_synthetic(tmp_path / 'three', n_clips=3, classes=3, frames=8, size=32)
    assert 'mirrored' not in caplog.text
    gen_synthetic(tmp_path / 'four', n_clips=4, classes=4, frames=8, size=32)
    assert 'mirrored motion pairs' in caplog.text


def test_gen_synthetic_test_split(dataset_root):
    assert len(load_index(dataset_root, 'train')) == 9
    assert len(load_index(dataset_root, 'test')) == 3


def test_single_frames_are_class_ambiguous(tmp_path):
    """Per-frame statistics of a shuffled clip carry no class signal."""
    root = gen_synthetic(tmp_path / 'data', n_clips=60, classes=3, frames=8, size=32, seed=5)
    index = load_index(root)
    rng = np.random.default_rng(0)
    features = []
    for clip in index.clips:
        frames = read_clip(clip)
        t = int(rng.integers(clip.frames))
        rgb = frames['rgb'][t].astype(np.float64)
        rows, cols = np.nonzero(rgb[..., 0] > 120)
        features.append([rgb.mean(), frames['tir'][t].mean(), frames['depth'][t].mean(),
                         rows.mean(), cols.mean()])
    features = np.asarray(features)
    labels = np.asarray(index.labels())
    # nearest class centroid, leave one out
    correct = 0
    for i in range(len(labels)):
        keep = np.arange(len(labels)) != i
        centroids = [features[keep & (labels == k)].mean(axis=0) for k in range(3)]
        distances = [np.linalg.norm((features[i] - c) / (features[keep].std(axis=0) + 1e-9))
                     for c in centroids]
        correct += int(np.argmin(distances) == labels[i])
    assert correct / len(labels) <= 1. / 3 + 0.15


def test_stratified_split(train_index):
    train, val = stratified_split(train_index, 0.1, seed=0)
    assert len(train) + len(val) == len(train_index)
    assert sorted(set(val.labels())) == [0, 1, 2]
    assert sorted(set(train.labels())) == [0, 1, 2]
    again_train, again_val = stratified_split(train_index, 0.1, seed=0)
    assert [c.clip_id for c in again_val.clips] == [c.clip_id for c in val.clips]
    assert not {c.clip_id for c in train.clips} & {c.clip_id for c in val.clips}
    whole, empty = stratified_split(train_index, 0.0, seed=0)
    assert len(whole) == len(train_index) and len(empty) == 0


def test_multimodal_dataset_items(train_index, tiny_augment):
    train_set = MultimodalDataset(train_index, SamplerConfig(segments=4), tiny_augment, train=True, seed=1)
    tensor, label = train_set[0]
    assert tensor.shape == (3, 4, 3, 32, 32)
    assert tensor.dtype == torch.float32
    assert label == train_index.clips[0].label
    assert torch.equal(train_set[0][0], tensor)
    train_set.set_epoch(1)
    assert not torch.equal(train_set[0][0], tensor)

    test_set = MultimodalDataset(train_index, SamplerConfig(segments=4, mode='center'),
                                 tiny_augment, train=False)
    flipped = MultimodalDataset(train_index, SamplerConfig(segments=4, mode='center'),
                                tiny_augment, train=False, tta_flip=True)
    assert torch.equal(flipped[2][0], test_set[2][0].flip(-1))
