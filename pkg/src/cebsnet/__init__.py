"""Bitemporal change detection with channel swapping, excitation/suppression
refinement and pyramid spatial-channel attention, on a numpy autograd core."""

from .config import ModelConfig, RefineConfig, TrainConfig
from .model import CEBSNet
from .tensor import ContractError, NonFiniteError, Tensor, no_grad

__all__ = [
    "CEBSNet",
    "ContractError",
    "ModelConfig",
    "NonFiniteError",
    "RefineConfig",
    "Tensor",
    "TrainConfig",
    "no_grad",
]
__version__ = "0.1.0"
