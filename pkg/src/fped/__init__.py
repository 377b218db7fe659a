"""Functional-network prior-guided mixture-of-experts decoding at desk scale."""

from .config import TrainConfig, load_config
from .datagen import FeatureAssembler, generate_dataset, load_dataset, save_dataset
from .estimator import FPEDRegressor
from .model import FPEDNet
from .trainer import ablate, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "FPEDNet",
    "FPEDRegressor",
    "FeatureAssembler",
    "TrainConfig",
    "ablate",
    "evaluate",
    "generate_dataset",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "save_checkpoint",
    "save_dataset",
    "train",
]
