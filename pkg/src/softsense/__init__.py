"""ConFormer multi-task soft sensor with SuperLoss, in plain NumPy."""

from .model import ModelConfig, build_model, model_forward, predict
from .train import resolve_config, train_model

__all__ = ["ModelConfig", "build_model", "model_forward", "predict", "resolve_config", "train_model"]
__version__ = "0.1.0"
