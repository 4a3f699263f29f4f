"""Coarse-to-fine few-shot learning: train on coarse labels, adapt to fine classes from a few shots."""

from .calibrate import CalibrationConfig, calibrate_support
from .config import RunConfig
from .data import Dataset, LabelHierarchy, SynthConfig, generate_synthetic, load_dataset
from .evaluate import evaluate, layer_probe, sample_episodes
from .model import EncoderConfig, build_model
from .repository import FeatureRepository, build_repository
from .trainer import TrainConfig, train

__version__ = "0.1.0"
