import dataclasses
import typing

import numpy as np
from PIL import Image

from simple_mmar.errors import ConfigError


def check_int_in_range(value, field, min_value, max_value):
    """
    Validate a value that should be an integer within a range

    :param value: value to check
    :param field: name of field for exception text
    :param min_value: minimum that value can equal
    :param max_value: maximum that value can equal (None for unbounded)
    :return: the value
    """
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError('{} must be int not {}'.format(field, type(value).__name__))
    if max_value is None:
        if value < min_value:
            raise ConfigError('{} must be at least {}'.format(field, min_value))
    elif not min_value <= value <= max_value:
        raise ConfigError('{} must be between {} and {} (inclusive)'
                          .format(field, min_value, max_value))
    return value


def check_float_in_range(value, field, min_value, max_value=None, min_inclusive=True):
    """
    Validate a real number against a lower (and optional upper) bound

    :param value: value to check, int is accepted
    :param field: name of field for exception text
    :param min_value: lower bound
    :param max_value: upper bound, inclusive (None for unbounded)
    :param min_inclusive: whether value may equal min_value
    :return: the value as float
    """
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError('{} must be a number not {}'.format(field, type(value).__name__))
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError('{} must be finite'.format(field))
    too_low = value < min_value if min_inclusive else value <= min_value
    if too_low:
        raise ConfigError('{} must be {} {}'.format(
            field, 'at least' if min_inclusive else 'greater than', min_value))
    if max_value is not None and value > max_value:
        raise ConfigError('{} must be at most {}'.format(field, max_value))
    return value


def check_value_in_list(value, field, valid_values):
    """
    Validate a value that can only be one of a select few items

    :param value: value to check
    :param field: name of field for exception text
    :param valid_values: iterable of valid values
    :return: the value
    """
    valid_values = list(valid_values)
    if value not in valid_values:
        raise ConfigError('{} must be in {}'.format(field, str(valid_values)))
    return value


def build_dataclass(cls, data, path=''):
    """
    Build a (possibly nested) dataclass from plain dicts and lists.

    Unknown keys raise ConfigError naming the key and its valid siblings.

    :param cls: dataclass type
    :param data: dict or None (all defaults)
    :param path: dotted prefix used in error messages
    """
    if data is None:
        data = {}
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError('{} must be a mapping not {}'.format(path or cls.__name__,
                                                                type(data).__name__))
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = [key for key in data if key not in fields]
    if unknown:
        key = unknown[0]
        raise ConfigError('unknown config key "{}"; valid keys are: {}'.format(
            _join(path, key), ', '.join(sorted(_join(path, name) for name in fields))))
    kwargs = {}
    for name, value in data.items():
        field_type = hints[name]
        if dataclasses.is_dataclass(field_type):
            value = build_dataclass(field_type, value, _join(path, name))
        elif isinstance(value, tuple):
            value = list(value)
        kwargs[name] = value
    return cls(**kwargs)


def _join(path, key):
    return '{}.{}'.format(path, key) if path else key


def load_frame(path, channels):
    """
    Decode an image file into a uint8 array

    :param path: image file
    :param channels: 3 (RGB, grayscale replicated) or 1 (luminance)
    :return: array of shape (H, W, channels)
    """
    with Image.open(path) as image:
        image = image.convert('RGB' if channels == 3 else 'L')
        array = np.asarray(image, dtype=np.uint8)
    if array.ndim == 2:
        array = array[:, :, None]
    return array


def save_frame(array, path):
    """
    Encode a uint8 (H, W) or (H, W, C) array, format picked by the file extension.
    """
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path)


def resize_frame(array, width, height):
    """
    Bilinear resize of a uint8 (H, W, C) frame with Pillow; no-op when already sized.
    """
    if array.shape[0] == height and array.shape[1] == width:
        return array
    channels = array.shape[2]
    image = Image.fromarray(array[:, :, 0] if channels == 1 else array)
    resized = np.asarray(image.resize((int(width), int(height)), Image.BILINEAR), dtype=np.uint8)
    if resized.ndim == 2:
        resized = resized[:, :, None]
    return resized
