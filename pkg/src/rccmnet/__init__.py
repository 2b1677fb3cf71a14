"""Joint plaque segmentation and echogenicity classification with region and
category confidence modules, plus a synthetic ultrasound phantom to train on."""

from .model import ModelConfig, RCCMNet, build_model
from .synthdata import CLASS_NAMES, PhantomConfig, generate_dataset, load_dataset, split_dataset
from .training import TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ModelConfig",
    "PhantomConfig",
    "RCCMNet",
    "TrainConfig",
    "ablate",
    "build_model",
    "evaluate",
    "generate_dataset",
    "load_dataset",
    "split_dataset",
    "train",
]
