import numpy as np
import pytest
import PIL.Image

from simple_mmar.mm_data import gen_synthetic, load_index
from simple_mmar.sampling_augment import AugmentConfig
from simple_mmar.tsm_model import ModelConfig, build_model


@pytest.fixture
def image():
    return PIL.Image.new('RGB', (40, 30), (10, 20, 30))


@pytest.fixture(scope='session')
def dataset_root(tmp_path_factory):
    """9 training clips and 3 test clips, 3 classes, 8 frames of 32x32."""
    root = tmp_path_factory.mktemp('synthetic') / 'data'
    return gen_synthetic(root, n_clips=9, classes=3, frames=8, size=32, seed=3, test_clips=3)


@pytest.fixture(scope='session')
def train_index(dataset_root):
    return load_index(dataset_root, 'train')


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(preset='deep-50', width=0.125, segments=4, num_classes=3, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_model_cfg):
    model = build_model(tiny_model_cfg, seed=0)
    model.eval()
    return model


@pytest.fixture
def tiny_augment():
    return AugmentConfig(input_size=32, scale_size=32).resolved(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

