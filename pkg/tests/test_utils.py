from dataclasses import dataclass, field

import numpy as np
import pytest

from simple_mmar.errors import ConfigError
from simple_mmar.utils import (build_dataclass, check_float_in_range, check_int_in_range,
                               check_value_in_list, load_frame, resize_frame, save_frame)


def test_check_int_in_range():
    assert check_int_in_range(5, 'segments', 1, 64) == 5
    assert check_int_in_range(1000, 'seed', 0, None) == 1000


@pytest.mark.parametrize('value', (0, 65, 'A', '', None, 2.0, True))
def test_check_int_in_range_errors(value):
    with pytest.raises(ValueError):
        check_int_in_range(value, 'segments', 1, 64)


def test_check_int_in_range_message():
    with pytest.raises(ConfigError, match='segments must be between 1 and 64 \\(inclusive\\)'):
        check_int_in_range(65, 'segments', 1, 64)


def test_check_float_in_range():
    assert check_float_in_range(1, 'lr', 0.0, min_inclusive=False) == 1.0
    assert isinstance(check_float_in_range(1, 'lr', 0.0), float)
    for value in (0.0, -1.0, float('nan'), float('inf'), 'x', None):
        with pytest.raises(ConfigError):
            check_float_in_range(value, 'lr', 0.0, min_inclusive=False)
    with pytest.raises(ConfigError):
        check_float_in_range(1.5, 'flip_p', 0.0, 1.0)


def test_check_value_in_list():
    assert check_value_in_list('center', 'mode', ('random', 'center')) == 'center'
    with pytest.raises(ConfigError, match='mode must be in'):
        check_value_in_list('middle', 'mode', ('random', 'center'))


@dataclass
class Inner:
    depth: int = 1


@dataclass
class Outer:
    name: str = 'x'
    inner: Inner = field(default_factory=Inner)


def test_build_dataclass_nested():
    built = build_dataclass(Outer, {'name': 'y', 'inner': {'depth': 3}})
    assert built == Outer(name='y', inner=Inner(depth=3))
    assert build_dataclass(Outer, None) == Outer()


def test_build_dataclass_unknown_key_names_siblings():
    with pytest.raises(ConfigError) as error:
        build_dataclass(Outer, {'inner': {'width': 3}}, 'top')
    assert 'top.inner.width' in str(error.value)
    assert 'top.inner.depth' in str(error.value)


def test_frame_round_trip(tmp_path, rng):
    frame = rng.integers(0, 256, (12, 16, 3), dtype=np.uint8)
    save_frame(frame, tmp_path / 'frame.png')
    assert np.array_equal(load_frame(tmp_path / 'frame.png', 3), frame)

    gray = rng.integers(0, 256, (12, 16, 1), dtype=np.uint8)
    save_frame(gray, tmp_path / 'gray.png')
    loaded = load_frame(tmp_path / 'gray.png', 1)
    assert loaded.shape == (12, 16, 1)
    assert np.array_equal(loaded, gray)
    replicated = load_frame(tmp_path / 'gray.png', 3)
    assert np.array_equal(replicated[:, :, 0], replicated[:, :, 2])


def test_load_frame_from_pil(tmp_path, image):
    image.save(tmp_path / 'plain.png')
    frame = load_frame(tmp_path / 'plain.png', 3)
    assert frame.shape == (30, 40, 3)
    assert tuple(frame[0, 0]) == (10, 20, 30)


def test_resize_frame(rng):
    frame = rng.integers(0, 256, (30, 40, 3), dtype=np.uint8)
    assert resize_frame(frame, 20, 10).shape == (10, 20, 3)
    assert resize_frame(frame, 40, 30) is frame
    assert resize_frame(frame[:, :, :1].copy(), 8, 8).shape == (8, 8, 1)
