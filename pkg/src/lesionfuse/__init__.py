"""Multimodal skin-lesion classification with an auxiliary super-resolution task."""

from .errors import (ConfigError, ContractError, FormatError, LesionFuseError, NumericError,
                     ParseError, SchemaError, ShapeError, StateError, VersionError)
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"
