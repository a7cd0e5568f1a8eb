"""Dense float64 kernels and tape-based reverse-mode autodiff."""

from . import kernels
from .gradcheck import check_gradients, numeric_gradient, relative_error
from .params import ParameterStore, glorot_init
from .tape import Node, NumericalError, ShapeError, Tape

__all__ = [
    "Node",
    "NumericalError",
    "ParameterStore",
    "ShapeError",
    "Tape",
    "check_gradients",
    "glorot_init",
    "kernels",
    "numeric_gradient",
    "relative_error",
]
