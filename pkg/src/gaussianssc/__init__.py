"""Framework-free two-stage semantic scene completion on triplanes with
Gaussian anchoring and Gaussian-triplane refinement."""

from .tensor import Tensor, Tape, ShapeError, ConfigError, NumericError, grad_check
from .geometry import (CameraIntrinsics, CameraPose, VoxelGridSpec,
                       SemanticVolume, UNKNOWN)
from .config import RunConfig, parse_config

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "ShapeError", "ConfigError", "NumericError", "grad_check",
    "CameraIntrinsics", "CameraPose", "VoxelGridSpec", "SemanticVolume", "UNKNOWN",
    "RunConfig", "parse_config", "__version__",
]
