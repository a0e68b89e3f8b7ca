"""Sketch-guided object localization on a synthetic shape corpus."""

from .tensor import (
    GradientMap,
    NonFiniteError,
    Param,
    PrecisionError,
    ShapeError,
    Tensor,
    backward,
    finite_difference_check,
    get_precision,
    set_precision,
)

__all__ = [
    "GradientMap",
    "NonFiniteError",
    "Param",
    "PrecisionError",
    "ShapeError",
    "Tensor",
    "backward",
    "finite_difference_check",
    "get_precision",
    "set_precision",
]

__version__ = "0.1.0"
