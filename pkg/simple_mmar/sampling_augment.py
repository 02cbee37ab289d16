"""
Group temporal sampling and group augmentation of multimodal frame stacks.

"Group" means one random draw per clip, applied identically to every frame of
every modality.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from simple_mmar.errors import ConfigError
from simple_mmar.utils import (check_float_in_range, check_int_in_range,
                               check_value_in_list, resize_frame)

LOGGER = logging.getLogger(__name__)

SAMPLING_MODES = ('random', 'center', 'dense')

IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]
NEUTRAL_MEAN = [0.5, 0.5, 0.5]
NEUTRAL_STD = [0.5, 0.5, 0.5]


@dataclass
class SamplerConfig:
    """
    Temporal sampling settings

    :param segments: number of groups S (one frame per group)
    :param mode: 'random' (training), 'center' (testing) or 'dense'
    :param passes: number of sampling passes (1 = once, 2 = twice sampling)
    :param dense_windows: number of strided windows in dense mode
    """
    segments: int = 8
    mode: str = 'random'
    passes: int = 1
    dense_windows: int = 10

    def __post_init__(self):
        check_int_in_range(self.segments, 'sampler.segments', 1, 256)
        check_value_in_list(self.mode, 'sampler.mode', SAMPLING_MODES)
        check_int_in_range(self.passes, 'sampler.passes', 1, 64)
        check_int_in_range(self.dense_windows, 'sampler.dense_windows', 1, 256)


@dataclass
class AugmentConfig:
    """
    Group augmentation and normalization settings

    :param input_size: side of the square network input
    :param scale_size: short-side target of the test-time Group Scale
    :param scales: multi-scale crop fractions of the shorter frame side
    :param flip_p: probability of the group horizontal flip at training time
    :param mean: per-channel mean, None picks a default from the model initialization
    :param std: per-channel std, None picks a default from the model initialization
    :param max_retries: redraws allowed when a drawn crop does not fit
    """
    input_size: int = 224
    scale_size: int = 256
    scales: List[float] = field(default_factory=lambda: [1.0, 0.875, 0.75, 0.66])
    flip_p: float = 0.5
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None
    max_retries: int = 10

    def __post_init__(self):
        check_int_in_range(self.input_size, 'augment.input_size', 8, 4096)
        check_int_in_range(self.scale_size, 'augment.scale_size', 8, 4096)
        if not self.scales:
            raise ConfigError('augment.scales must not be empty')
        self.scales = [check_float_in_range(s, 'augment.scales', 0.0, 2.0, min_inclusive=False)
                       for s in self.scales]
        self.flip_p = check_float_in_range(self.flip_p, 'augment.flip_p', 0.0, 1.0)
        check_int_in_range(self.max_retries, 'augment.max_retries', 0, 1000)
        for name in ('mean', 'std'):
            values = getattr(self, name)
            if values is None:
                continue
            if len(values) not in (1, 3):
                raise ConfigError('augment.{} must have 1 or 3 values'.format(name))
            setattr(self, name, [float(v) for v in values])
        if self.std is not None:
            check_std(self.std)

    def resolved(self, pretrained):
        """
        Copy with mean/std filled: pretraining statistics when a pretrained
        backbone is used, 0.5/0.5 otherwise.
        """
        mean = self.mean if self.mean is not None else (
            IMAGENET_MEAN if pretrained else NEUTRAL_MEAN)
        std = self.std if self.std is not None else (
            IMAGENET_STD if pretrained else NEUTRAL_STD)
        return dataclasses.replace(self, mean=list(mean), std=list(std))


@dataclass
class GroupCropParams:
    """
    The single random draw shared by all frames and modalities of one clip.

    The crop box is stored in fractions of the reference frame so that it maps
    onto modalities with other native resolutions.
    """
    scale: float
    x: float
    y: float
    width: float
    height: float
    flip: bool

    def box_for(self, frame_width, frame_height):
        """Pixel box (left, top, width, height) of this crop for a frame size."""
        left = int(round(self.x * frame_width))
        top = int(round(self.y * frame_height))
        width = max(1, int(round(self.width * frame_width)))
        height = max(1, int(round(self.height * frame_height)))
        width = min(width, frame_width - left)
        height = min(height, frame_height - top)
        return left, top, width, height


def check_std(std):
    for value in std:
        if not value > 0:
            raise ConfigError('normalization std must be strictly positive, got {}'.format(value))


def sample_indices(frame_count, cfg, seed=0):
    """
    Dynamic group temporal sampling.

    The T frames are split into S bins [floor(i*T/S), floor((i+1)*T/S)).

    * random: one uniform index per bin, pass p draws with seed + p
    * center: bin centre floor(i*T/S + T/(2S)); with several passes, pass p is
      moved inside the bin by ((P + 2p) mod 2P) / 2P of a bin, so twice sampling
      takes bin centres then bin starts
    * dense: ``cfg.dense_windows`` windows of S consecutive frames with evenly
      strided starts, one window per pass

    Empty bins (T < S) fall back to floor(i*T/S) clamped to T - 1.

    :param frame_count: number of frames T (>= 1)
    :param cfg: SamplerConfig
    :param seed: integer seed for random mode
    :return: list of passes, each a non-decreasing list of S frame indices
    """
    check_int_in_range(frame_count, 'frame_count', 1, None)
    total, segments = frame_count, cfg.segments
    if cfg.mode == 'dense':
        last_start = max(total - segments, 0)
        starts = np.linspace(0, last_start, cfg.dense_windows)
        return [[min(int(round(start)) + j, total - 1) for j in range(segments)]
                for start in starts]

    passes = []
    for pass_index in range(cfg.passes):
        if cfg.mode == 'random':
            rng = np.random.default_rng(seed + pass_index)
            indices = []
            for i in range(segments):
                low = i * total // segments
                high = (i + 1) * total // segments
                if high > low:
                    indices.append(low + int(rng.integers(high - low)))
                else:
                    indices.append(min(low, total - 1))
        else:
            denominator = 2 * cfg.passes
            offset = (cfg.passes + 2 * pass_index) % denominator
            indices = [min((denominator * i + offset) * total // (denominator * segments), total - 1)
                       for i in range(segments)]
        passes.append(indices)
    return passes


def draw_group_crop(frame_width, frame_height, cfg, rng):
    """
    Draw one multi-scale crop and one flip decision for a clip.

    The scale is applied to the shorter side; a scale whose crop does not fit
    is redrawn up to ``cfg.max_retries`` times, then the smallest scale is used.
    """
    base = min(frame_width, frame_height)
    scale = float(cfg.scales[int(rng.integers(len(cfg.scales)))])
    retries = 0
    while int(base * scale) > base and retries < cfg.max_retries:
        scale = float(cfg.scales[int(rng.integers(len(cfg.scales)))])
        retries += 1
    if int(base * scale) > base:
        scale = min(cfg.scales)
    side = min(max(1, int(base * scale)), base)
    left = int(rng.integers(frame_width - side + 1))
    top = int(rng.integers(frame_height - side + 1))
    flip = bool(rng.random() < cfg.flip_p)
    return GroupCropParams(scale=scale, x=left / frame_width, y=top / frame_height,
                           width=side / frame_width, height=side / frame_height, flip=flip)


def apply_train_augment(frames, cfg, seed, return_params=False):
    """
    Group Multi-scale Crop, Group Random Horizontal Flip and Group Normalization.

    :param frames: dict modality -> uint8 array (S, H, W, C)
    :param cfg: AugmentConfig with mean/std resolved
    :param seed: integer seed of the clip's single random draw
    :param return_params: also return the GroupCropParams that were applied
    :return: dict modality -> float32 array (S, size, size, C)
    """
    if not frames:
        raise ValueError('frames must contain at least one modality')
    rng = np.random.default_rng(seed)
    reference = next(iter(frames.values()))
    params = draw_group_crop(reference.shape[2], reference.shape[1], cfg, rng)
    size = cfg.input_size
    stacks = {}
    for modality, stack in frames.items():
        left, top, width, height = params.box_for(stack.shape[2], stack.shape[1])
        out = np.stack([resize_frame(frame[top:top + height, left:left + width], size, size)
                        for frame in stack])
        if params.flip:
            out = out[:, :, ::-1]
        stacks[modality] = normalize(out, cfg.mean, cfg.std)
    if return_params:
        return stacks, params
    return stacks


def scaled_size(frame_width, frame_height, short_side):
    """Group Scale geometry: short side to ``short_side``, aspect ratio kept."""
    if frame_width <= frame_height:
        return short_side, int(short_side * frame_height / frame_width)
    return int(short_side * frame_width / frame_height), short_side


def apply_test_augment(frames, cfg, tta_flip=False):
    """
    Group Scale, Group Center Crop and Group Normalization, deterministic.

    The scale target never drops below the crop size, so a full-resolution
    setting (input_size == scale_size) keeps the whole scaled frame.

    :param frames: dict modality -> uint8 array (S, H, W, C)
    :param cfg: AugmentConfig with mean/std resolved
    :param tta_flip: view of the horizontally mirrored clip; the input is mirrored
        before scaling and cropping so a clip and its mirror give the same view pair
    :return: dict modality -> float32 array (S, size, size, C)
    """
    size = cfg.input_size
    short_side = max(cfg.scale_size, size)
    stacks = {}
    for modality, stack in frames.items():
        if tta_flip:
            stack = np.ascontiguousarray(stack[:, :, ::-1])
        width, height = scaled_size(stack.shape[2], stack.shape[1], short_side)
        left = int(round((width - size) / 2.))
        top = int(round((height - size) / 2.))
        out = np.stack([resize_frame(frame, width, height)[top:top + size, left:left + size]
                        for frame in stack])
        stacks[modality] = normalize(out, cfg.mean, cfg.std)
    return stacks


def channel_stats(values, channels):
    """Fit a per-channel statistic list to the channel count of a stack."""
    values = [float(v) for v in values]
    if len(values) == channels:
        return np.asarray(values)
    if channels == 1:
        return np.asarray([float(np.mean(values))])
    if len(values) == 1:
        return np.asarray(values * channels)
    raise ConfigError('cannot apply {} normalization values to {} channels'
                      .format(len(values), channels))


def normalize(stack, mean, std):
    """
    out = (in / 255 - mean) / std, channel-wise on the last axis.

    float64 input stays float64, anything else becomes float32.
    """
    check_std(std)
    dtype = np.float64 if stack.dtype == np.float64 else np.float32
    channels = stack.shape[-1]
    mean = channel_stats(mean, channels).astype(dtype)
    std = channel_stats(std, channels).astype(dtype)
    return ((stack.astype(dtype) / 255. - mean) / std).astype(dtype)


def denormalize(stack, mean, std):
    """Inverse of :func:`normalize`, back to the [0, 255] range (float)."""
    check_std(std)
    channels = stack.shape[-1]
    mean = channel_stats(mean, channels)
    std = channel_stats(std, channels)
    return (stack * std + mean) * 255.
