"""
Multimodal (RGB / TIR / Depth) frame-folder datasets.

On-disk layout::

    root/
      index.json
      clips/<clip_id>/<modality>/img_00001.<ext>

``index.json``::

    {"classes": [...],
     "extensions": {"rgb": "jpg", "tir": "jpg", "depth": "png"},   (optional, default png)
     "clips": [{"id": "v0000", "label": 0, "frames": 16, "split": "train",
                "modalities": {"rgb": "clips/v0000/rgb", ...},
                "modality_frames": {"tir": 12}}]}                     (optional)
"""
import enum
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from simple_mmar.errors import DatasetError
from simple_mmar.sampling_augment import (apply_test_augment, apply_train_augment,
                                          sample_indices)
from simple_mmar.utils import check_int_in_range, load_frame, save_frame

LOGGER = logging.getLogger(__name__)

INDEX_FILE = 'index.json'
FRAME_PATTERN = 'img_{:05d}.{}'


class ModalityKind(enum.Enum):
    RGB = 'rgb'
    TIR = 'tir'
    DEPTH = 'depth'

    @property
    def label(self):
        return self.name


MODALITIES = tuple(kind.value for kind in ModalityKind)

MOTION_PATTERNS = (
    ('move_down', (0, 1)),
    ('move_up', (0, -1)),
    ('move_right', (1, 0)),
    ('move_left', (-1, 0)),
    ('move_down_right', (1, 1)),
    ('move_up_left', (-1, -1)),
    ('move_up_right', (1, -1)),
    ('move_down_left', (-1, 1)),
)


def modality_label(modality):
    return ModalityKind(modality).label


@dataclass
class MultimodalClip:
    """
    One video sample: aligned per-modality frame folders and its label.

    ``frames`` is the aligned length T; ``modality_frames`` holds the real
    length of every modality (shorter ones are index-stretched on read).
    """
    clip_id: str
    label: int
    frames: int
    modality_dirs: Dict[str, Path]
    modality_frames: Dict[str, int]
    extensions: Dict[str, str]
    channels: Dict[str, int]
    split: str = 'train'

    @property
    def modalities(self):
        return tuple(self.modality_dirs)

    def frame_path(self, modality, number):
        """Path of 1-based frame ``number`` of ``modality``."""
        return self.modality_dirs[modality] / FRAME_PATTERN.format(number, self.extensions[modality])


@dataclass
class DatasetIndex:
    root: Path
    clips: List[MultimodalClip]
    classes: List[str]
    split: str = 'train'
    modalities: tuple = MODALITIES
    channels: Dict[str, int] = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.classes)

    def __len__(self):
        return len(self.clips)

    def labels(self):
        return [clip.label for clip in self.clips]

    def subset(self, positions, split=None):
        return DatasetIndex(root=self.root, clips=[self.clips[i] for i in positions],
                            classes=self.classes, split=split or self.split,
                            modalities=self.modalities, channels=self.channels)


def resolve_channels(modalities, channels=None):
    """RGB always has 3 channels, TIR/DEPTH default to 3 (replicated grayscale)."""
    channels = dict(channels or {})
    resolved = {}
    for modality in modalities:
        ModalityKind(modality)
        count = 3 if modality == ModalityKind.RGB.value else channels.get(modality, 3)
        if count not in (1, 3):
            raise DatasetError('{} channel count must be 1 or 3'.format(modality_label(modality)))
        resolved[modality] = count
    return resolved


def load_index(root, split='train', modalities=MODALITIES, channels=None):
    """
    Load and validate ``root/index.json``

    :param root: dataset root
    :param split: split tag; clips without a split field belong to 'train'
    :param modalities: modalities every clip must provide
    :param channels: optional {modality: 1 or 3}
    :return: DatasetIndex
    """
    root = Path(root)
    index_path = root / INDEX_FILE
    if not index_path.is_file():
        raise DatasetError('missing index file {}'.format(index_path))
    try:
        with open(index_path) as index_file:
            raw = json.load(index_file)
    except ValueError as exc:
        raise DatasetError('cannot parse {}: {}'.format(index_path, exc))

    modalities = tuple(modalities)
    for modality in modalities:
        try:
            ModalityKind(modality)
        except ValueError:
            raise DatasetError('unknown modality "{}", must be in {}'.format(modality, list(MODALITIES)))
    channels = resolve_channels(modalities, channels)
    classes = list(raw.get('classes') or [])
    if not classes:
        raise DatasetError('{} has no classes'.format(index_path))
    extensions = dict(raw.get('extensions') or {})

    clips = []
    seen = set()
    for entry in raw.get('clips', []):
        clip_split = entry.get('split', 'train')
        if clip_split != split:
            continue
        clip = _parse_clip(entry, root, classes, modalities, extensions, channels)
        if clip.clip_id in seen:
            raise DatasetError('duplicate clip id "{}"'.format(clip.clip_id))
        seen.add(clip.clip_id)
        clips.append(clip)
    LOGGER.info('loaded %d %s clips, %d classes from %s', len(clips), split, len(classes), root)
    return DatasetIndex(root=root, clips=clips, classes=classes, split=split,
                        modalities=modalities, channels=channels)


def _parse_clip(entry, root, classes, modalities, extensions, channels):
    clip_id = str(entry.get('id', ''))
    if not clip_id:
        raise DatasetError('clip entry without id in index')
    label = entry.get('label')
    if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < len(classes):
        raise DatasetError('clip "{}" label {} must be between 0 and {}'
                           .format(clip_id, label, len(classes) - 1))
    frames = entry.get('frames')
    if isinstance(frames, bool) or not isinstance(frames, int) or frames < 1:
        raise DatasetError('clip "{}" frames must be a positive int'.format(clip_id))
    available = entry.get('modalities') or {}
    lengths = entry.get('modality_frames') or {}

    modality_dirs = {}
    modality_frames = {}
    for modality in modalities:
        if modality not in available:
            raise DatasetError('clip "{}" lacks {} frames'.format(clip_id, modality_label(modality)))
        modality_dirs[modality] = root / available[modality]
        count = lengths.get(modality, frames)
        if not 1 <= count <= frames:
            raise DatasetError('clip "{}" {} frame count {} must be between 1 and {}'
                               .format(clip_id, modality_label(modality), count, frames))
        modality_frames[modality] = count

    clip = MultimodalClip(clip_id=clip_id, label=label, frames=frames,
                          modality_dirs=modality_dirs, modality_frames=modality_frames,
                          extensions={m: extensions.get(m, 'png') for m in modalities},
                          channels={m: channels[m] for m in modalities},
                          split=entry.get('split', 'train'))
    for modality in modalities:
        for number in range(1, modality_frames[modality] + 1):
            path = clip.frame_path(modality, number)
            if not path.is_file():
                raise DatasetError('clip "{}" lacks {} frames: missing {}'
                                   .format(clip_id, modality_label(modality), path))
    return clip


def stretch_indices(source_count, target_count):
    """Nearest-index map of a ``source_count`` sequence onto ``target_count`` slots."""
    return [i * source_count // target_count for i in range(target_count)]


def read_clip(clip):
    """
    Decode every frame of every modality of a validated clip.

    Modalities shorter than the clip length are stretched with
    :func:`stretch_indices`.

    :param clip: MultimodalClip
    :return: dict modality -> uint8 array (T, H, W, C), native resolution
    """
    sequences = {}
    for modality in clip.modalities:
        count = clip.modality_frames[modality]
        decoded = []
        for number in range(1, count + 1):
            path = clip.frame_path(modality, number)
            try:
                decoded.append(load_frame(path, clip.channels[modality]))
            except (OSError, ValueError) as exc:
                raise DatasetError('cannot decode frame {}: {}'.format(path, exc))
        stack = np.stack(decoded)
        if count < clip.frames:
            stack = stack[stretch_indices(count, clip.frames)]
        sequences[modality] = stack
    return sequences


def stratified_split(index, fraction, seed):
    """
    Split an index into (train, val), stratified by class and seed-determined.

    Every class with at least two clips keeps at least one clip on each side.
    """
    check_int_in_range(seed, 'seed', 0, None)
    if fraction <= 0:
        return index, index.subset([], split='val')
    rng = np.random.default_rng(seed)
    val_positions = []
    for label in range(index.num_classes):
        positions = [i for i, clip in enumerate(index.clips) if clip.label == label]
        if len(positions) < 2:
            continue
        take = min(max(1, int(round(fraction * len(positions)))), len(positions) - 1)
        val_positions.extend(rng.permutation(positions)[:take].tolist())
    val_positions = sorted(val_positions)
    chosen = set(val_positions)
    train_positions = [i for i in range(len(index)) if i not in chosen]
    return index.subset(train_positions, split='train'), index.subset(val_positions, split='val')


def stack_modalities(stacks, modalities):
    """
    Stack per-modality (S, H, W, C) arrays into a float tensor (M, S, 3, H, W).

    One-channel modalities are replicated to the 3-channel backbone stem.
    """
    shapes = {m: stacks[m].shape[:3] for m in modalities}
    if len(set(shapes.values())) != 1:
        raise ValueError('modality stacks differ in shape: {}'.format(shapes))
    tensors = []
    for modality in modalities:
        tensor = torch.from_numpy(np.ascontiguousarray(stacks[modality], dtype=np.float32))
        tensor = tensor.permute(0, 3, 1, 2)
        if tensor.shape[1] == 1:
            tensor = tensor.expand(-1, 3, -1, -1)
        tensors.append(tensor)
    return torch.stack(tensors)


def item_seed(seed, epoch, position):
    """Per-clip seed independent of data-loading worker layout."""
    return int(np.random.SeedSequence([seed, epoch, position]).generate_state(1)[0])


class MultimodalDataset(Dataset):
    """
    Sampled, augmented and stacked clips for a DataLoader.

    Items are ``(tensor [M, S, 3, H, W], label)``.

    :param index: DatasetIndex
    :param sampler: SamplerConfig
    :param augment: AugmentConfig with mean/std resolved
    :param train: training pipeline (random sampling + group augmentation)
    :param seed: base seed
    :param tta_flip: test pipeline only, flip every frame
    :param pass_index: which sampling pass to return
    """

    def __init__(self, index, sampler, augment, train, seed=0, tta_flip=False, pass_index=0):
        self.index = index
        self.sampler = sampler
        self.augment = augment
        self.train = train
        self.seed = seed
        self.tta_flip = tta_flip
        self.pass_index = pass_index
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.index)

    def __getitem__(self, position):
        clip = self.index.clips[position]
        seed = item_seed(self.seed, self.epoch, position)
        frames = read_clip(clip)
        passes = sample_indices(clip.frames, self.sampler, seed)
        indices = passes[min(self.pass_index, len(passes) - 1)]
        sampled = {modality: stack[indices] for modality, stack in frames.items()}
        if self.train:
            stacks = apply_train_augment(sampled, self.augment, seed)
        else:
            stacks = apply_test_augment(sampled, self.augment, self.tta_flip)
        return stack_modalities(stacks, self.index.modalities), clip.label


def _render_square(canvas, left, top, side, value):
    size = canvas.shape[0]
    rows = (top + np.arange(side)) % size
    cols = (left + np.arange(side)) % size
    canvas[np.ix_(rows, cols)] = value


def gen_synthetic(root, n_clips=30, classes=3, frames=16, size=64, seed=0,
                  depth_noise_only=False, test_clips=0, overwrite=False):
    """
    Write a synthetic multimodal temporal-motion dataset.

    Every class is one motion direction of a bright square that wraps around the
    frame edges and starts at a uniformly random position, so the square's
    position in any single frame is uniform for every class: only the temporal
    order tells classes apart. The square is rendered into all three modalities
    with per-modality noise. All frames are lossless PNG.

    From four classes on, the patterns include horizontal mirror pairs
    (right/left and the diagonals), which flip augmentation and flip TTA
    cannot tell apart; a warning is logged in that case.

    :param root: output directory
    :param n_clips: number of training clips (labels are balanced)
    :param classes: number of classes K, 2 to 8
    :param frames: frames per clip T, at least 8
    :param size: frame side in pixels, at least 32
    :param seed: generator seed; equal arguments give byte-identical files
    :param depth_noise_only: DEPTH frames carry noise only
    :param test_clips: extra clips written with split "test"
    :param overwrite: allow writing into a root that already holds an index
    :return: root path
    """
    check_int_in_range(n_clips, 'n_clips', 1, 100000)
    check_int_in_range(classes, 'classes', 2, len(MOTION_PATTERNS))
    check_int_in_range(frames, 'frames', 8, 100000)
    check_int_in_range(size, 'size', 32, 4096)
    check_int_in_range(seed, 'seed', 0, None)
    check_int_in_range(test_clips, 'test_clips', 0, 100000)
    if classes >= 4:
        LOGGER.warning('%d classes include horizontally mirrored motion pairs; '
                       'disable flip augmentation to keep them apart', classes)
    root = Path(root)
    if (root / INDEX_FILE).exists() and not overwrite:
        raise DatasetError('{} already holds a dataset, refusing to overwrite'.format(root))
    root.mkdir(parents=True, exist_ok=True)
    if not os.access(str(root), os.W_OK):
        raise DatasetError('{} is not writable'.format(root))

    side = max(4, size // 4)
    speed = size / frames
    entries = []
    total = n_clips + test_clips
    for number in tqdm(range(total), desc='Generating clips', disable=None):
        label = number % classes
        clip_id = 'v{:04d}'.format(number)
        rng = np.random.default_rng(np.random.SeedSequence([seed, number]))
        dx, dy = MOTION_PATTERNS[label][1]
        start_x, start_y = rng.uniform(0, size, 2)
        color = rng.integers(150, 256, 3)
        modality_dirs = {}
        for modality in MODALITIES:
            directory = root / 'clips' / clip_id / modality
            directory.mkdir(parents=True, exist_ok=True)
            modality_dirs[modality] = directory
        for t in range(frames):
            left = int(np.floor(start_x + dx * speed * t)) % size
            top = int(np.floor(start_y + dy * speed * t)) % size

            rgb = np.zeros((size, size, 3), dtype=np.float64) + 30.
            _render_square(rgb, left, top, side, color)
            rgb += rng.normal(0., 8., rgb.shape)

            tir = np.zeros((size, size), dtype=np.float64) + 40.
            _render_square(tir, left, top, side, 210.)
            tir += rng.normal(0., 12., tir.shape)

            if depth_noise_only:
                depth = rng.uniform(0., 255., (size, size))
            else:
                depth = np.zeros((size, size), dtype=np.float64) + 180.
                _render_square(depth, left, top, side, 90.)
                depth += rng.normal(0., 6., depth.shape)

            for modality, frame in (('rgb', rgb), ('tir', tir), ('depth', depth)):
                frame = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
                save_frame(frame, modality_dirs[modality] / FRAME_PATTERN.format(t + 1, 'png'))
        entries.append({
            'id': clip_id,
            'label': label,
            'frames': frames,
            'split': 'train' if number < n_clips else 'test',
            'modalities': {m: 'clips/{}/{}'.format(clip_id, m) for m in MODALITIES},
        })

    index = {
        'classes': [name for name, _ in MOTION_PATTERNS[:classes]],
        'extensions': {m: 'png' for m in MODALITIES},
        'clips': entries,
    }
    with open(root / INDEX_FILE, 'w') as index_file:
        json.dump(index, index_file, indent=2, sort_keys=True)
    LOGGER.info('wrote %d synthetic clips (%d classes, %d frames, %dpx) to %s',
                total, classes, frames, size, root)
    return root
