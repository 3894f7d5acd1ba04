"""Differentiable TDD MIMO link simulator with an end-to-end trained channel predictor."""

from . import autodiff, beamforming, channel, harness, model, phy, training
from .autodiff import Tape, Tensor, backprop, finite_difference_check
from .channel import generate_realization, load_database, save_database
from .model import DeepTxModel, ModelConfig, load_checkpoint, param_count, save_checkpoint, variant

__all__ = [
    "autodiff", "beamforming", "channel", "harness", "model", "phy", "training",
    "Tape", "Tensor", "backprop", "finite_difference_check",
    "generate_realization", "load_database", "save_database",
    "DeepTxModel", "ModelConfig", "load_checkpoint", "param_count", "save_checkpoint", "variant",
]
