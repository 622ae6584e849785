"""Semi-supervised training with stability and mutual-exclusivity losses.

A small numpy reverse-mode autodiff engine, stochastic layers (dropout,
randomized max-pooling), the unsupervised losses over replica groups, data
loading for MNIST IDX files and synthetic blobs, and an SGD trainer.
"""

from .errors import (
    BatchError,
    ConfigError,
    DimensionError,
    NumericError,
    ParameterError,
    ParseError,
    StabnetError,
)
from .losses import LossWeights, batch_objective, combined_unsup_loss, cross_entropy, me_loss, ts_loss
from .tensor import Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "BatchError",
    "ConfigError",
    "DimensionError",
    "LossWeights",
    "NumericError",
    "ParameterError",
    "ParseError",
    "StabnetError",
    "Tensor",
    "batch_objective",
    "combined_unsup_loss",
    "cross_entropy",
    "grad_check",
    "me_loss",
    "ts_loss",
]
