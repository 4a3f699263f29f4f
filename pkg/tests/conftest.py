import numpy as np
import pytest
import torch

from c2fs.data import LabelHierarchy, SynthConfig, generate_synthetic
from c2fs.model import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_vector_cfg():
    return EncoderConfig(input_shape=(12, 1, 1), stage_channels=(8, 8, 8, 8), embedding_dim=6,
                         projector_dim=5, projector_hidden=7, decoder_channels=(4, 4, 4, 4),
                         coarse_count=3)


@pytest.fixture
def small_image_cfg():
    return EncoderConfig(input_shape=(3, 8, 8), stage_channels=(4, 4, 6, 6), stage_strides=(2, 1, 2, 1),
                         embedding_dim=5, projector_dim=4, projector_hidden=6,
                         decoder_channels=(3, 3, 4, 4), coarse_count=2)


@pytest.fixture
def tiny_data():
    sc = SynthConfig(hierarchy=LabelHierarchy.uniform(3, 2), intrinsic_dim=6, ambient_dim=12,
                     coarse_radius=1.0, fine_radius=0.4, noise_sigma=0.15, seed=5)
    return sc, generate_synthetic(sc, 16, "train"), generate_synthetic(sc, 16, "test")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield
