"""Multi-scale dilated encoder-decoder for fingerprint denoising and inpainting."""

from .errors import (
    ConfigError,
    DataError,
    DomainError,
    FormatError,
    IntegrityError,
    ShapeError,
    StateError,
)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "FormatError",
    "IntegrityError",
    "ShapeError",
    "StateError",
    "Tape",
    "Tensor",
    "backward",
]
