"""Modality-wise cosine heads for imbalanced audio-visual fusion, on a small numpy autodiff."""

from .datagen import GeneratorConfig, generate_classification
from .losses import LossConfig, Variant, scale_lower_bound
from .model import FusionKind, ModelConfig
from .trainer import TrainConfig, default_model_config, train

__all__ = [
    "FusionKind",
    "GeneratorConfig",
    "LossConfig",
    "ModelConfig",
    "TrainConfig",
    "Variant",
    "default_model_config",
    "generate_classification",
    "scale_lower_bound",
    "train",
]

__version__ = "0.1.0"
