"""Amplitude-spectrum feature transformation for open compound domain adaptation, at desk scale."""

from .errors import (
    AstError,
    ConfigurationError,
    InvariantError,
    StageMissing,
    SymmetryError,
    TrainingDivergence,
)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "AstError",
    "BACKEND",
    "ConfigurationError",
    "InvariantError",
    "StageMissing",
    "SymmetryError",
    "TrainingDivergence",
    "__version__",
]
