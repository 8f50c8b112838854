"""Distributed K-FAC gradient preconditioning on a simulated data-parallel cluster."""
from ._accel import backend, set_backend
from .errors import (
    ConfigError,
    ConsistencyError,
    DimensionError,
    FormatError,
    ProtocolError,
    SingularMatrixError,
    StateError,
)
from .kfac import KfacConfig
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "backend",
    "set_backend",
    "ConfigError",
    "ConsistencyError",
    "DimensionError",
    "FormatError",
    "ProtocolError",
    "SingularMatrixError",
    "StateError",
    "KfacConfig",
    "TrainConfig",
    "Trainer",
]
