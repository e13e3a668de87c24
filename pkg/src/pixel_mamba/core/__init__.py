"""Numeric core: tensors, autodiff tape, primitives, Rng and tensor files."""

from .rng import Rng
from .tensor import GradientMap
from .tensor import NonFiniteError
from .tensor import ShapeError
from .tensor import Tape
from .tensor import TapeError
from .tensor import Tensor
from .tensor import apply_op
from .tensor import as_tensor
from .tensor import backward


__all__ = [
    "GradientMap",
    "NonFiniteError",
    "Rng",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "apply_op",
    "as_tensor",
    "backward",
]
