"""Squeeze-expansion transformer segmentation on a self-contained tensor core."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, grad_check, set_debug_checks
from .errors import (CheckpointFormatError, ConfigError, NumericsError,
                     SegtranError, ShapeError, UsageError)
from .params import ParamStore

__all__ = [
    "Tape",
    "Tensor",
    "ParamStore",
    "grad_check",
    "set_debug_checks",
    "SegtranError",
    "ShapeError",
    "ConfigError",
    "UsageError",
    "NumericsError",
    "CheckpointFormatError",
    "__version__",
]
