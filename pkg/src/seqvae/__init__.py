"""Sequence VAE training with aggressive encoder optimization and
posterior-collapse diagnostics."""

from .model import ElboBreakdown, GaussianParams, VaeModel
from .tensor import Tensor, Tape, grad_check, no_grad
from .training import TrainConfig, TrainState, train

__all__ = [
    "ElboBreakdown", "GaussianParams", "Tape", "Tensor", "TrainConfig",
    "TrainState", "VaeModel", "grad_check", "no_grad", "train",
]
