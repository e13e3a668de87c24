"""Dense tensors carried on a reverse-mode autodiff tape.

This module provides:
- Tensor: immutable n-dimensional array (numpy underneath) with a tape handle
- Tape: append-only record of operations, used as a context manager
- apply_op: the single entry point every primitive goes through
- backward: reverse sweep returning gradients for every tracked leaf

Recording only happens while a Tape is active on the current thread, so
inference and finite-difference probes run without building a graph.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Any
from typing import Callable
from typing import Iterator
from typing import Optional
from typing import Sequence

import numpy as np

from ..errors import NumericError
from ..errors import ValidationError


DEFAULT_DTYPE = np.float64
SUPPORTED_DTYPES = (np.float32, np.float64)

_node_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValidationError):
    """Raised when operand shapes do not fit an operation."""

    pass


class TapeError(ValidationError):
    """Raised when backward is asked for something the tape cannot give."""

    pass


class NonFiniteError(NumericError):
    """Raised when an operation produces NaN or Inf."""

    pass


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Immutable dense array with an optional autodiff handle.

    Attributes:
        data: Read-only numpy array (row-major)
        requires_grad: Whether gradients flow to or through this tensor
        node_id: Unique handle used as the key of gradient maps
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None):
        """Create a tensor from array-like data (always copies).

        Args:
            data: Array-like values
            requires_grad: Track this tensor as a differentiable leaf
            dtype: float32 or float64 (default: float64, or the input's float dtype)

        Raises:
            ShapeError: If any extent is zero
            NonFiniteError: If any value is NaN or Inf
        """
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            source = np.asarray(data)
            dtype = source.dtype if source.dtype in SUPPORTED_DTYPES else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        _validate(arr, "tensor")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        """Wrap a freshly computed array without copying."""
        out = cls.__new__(cls)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        out.node_id = next(_node_ids)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return np.array(self.data, copy=True)

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.size != 1:
            raise ShapeError(f"item() needs one element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Return a constant copy that is not tracked."""
        return Tensor._wrap(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops

        return ops.getitem(self, key)


def _validate(arr: np.ndarray, op: str) -> None:
    if any(extent == 0 for extent in arr.shape):
        raise ShapeError(f"{op}: zero extent in shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


def as_tensor(value: Any, dtype=None) -> Tensor:
    """Return value unchanged if it is a Tensor, else wrap it as a constant."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


@dataclass(frozen=True)
class Node:
    """One recorded operation.

    Attributes:
        op: Primitive name
        output: node_id of the produced tensor
        inputs: node_ids of the operands (None for untracked operands)
        backward: Vector-Jacobian product closure over the saved activations
    """

    op: str
    output: int
    inputs: tuple[Optional[int], ...]
    backward: BackwardFn


class Tape:
    """Append-only record of differentiable operations.

    Insertion order is a topological order because inputs always exist
    before the outputs computed from them.

    Example:
        >>> with Tape() as tape:
        ...     loss = ops.sum(x * x)
        >>> grads = backward(tape, loss)
        >>> grads.wrt(x)
    """

    def __init__(self):
        """Initialize an empty tape."""
        self.nodes: list[Node] = []
        self.leaves: dict[int, tuple[tuple[int, ...], Any]] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def holds(self, tensor: Tensor) -> bool:
        """Check whether a tensor was produced on, or is a leaf of, this tape."""
        return tensor.node_id in self._produced or tensor.node_id in self.leaves

    def record(
        self,
        op: str,
        output: Tensor,
        inputs: Sequence[Tensor],
        backward_fn: BackwardFn,
    ) -> None:
        """Append a node for an operation whose output requires grad."""
        ids: list[Optional[int]] = []
        for tensor in inputs:
            if not tensor.requires_grad:
                ids.append(None)
                continue
            if tensor.node_id not in self._produced:
                self.leaves.setdefault(tensor.node_id, (tensor.shape, tensor.dtype))
            ids.append(tensor.node_id)
        self.nodes.append(Node(op, output.node_id, tuple(ids), backward_fn))
        self._produced.add(output.node_id)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> Optional[Tape]:
    """Return the innermost tape active on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def apply_op(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap a primitive's result and record it on the active tape.

    Args:
        op: Primitive name (used in errors and the tape)
        out_data: Freshly computed output array (ownership is taken)
        inputs: Operand tensors, in the order backward_fn returns gradients
        backward_fn: Maps the output cotangent to one cotangent per input

    Returns:
        Output tensor

    Raises:
        NonFiniteError: If the output holds NaN or Inf
    """
    out_data = np.asarray(out_data)
    _validate(out_data, op)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=requires_grad)
    tape = active_tape()
    if tape is not None and requires_grad:
        tape.record(op, out, inputs, backward_fn)
    return out


class GradientMap(dict):
    """Mapping node_id -> gradient Tensor for every tracked leaf."""

    def wrt(self, tensor: Tensor) -> Tensor:
        """Gradient with respect to a leaf tensor."""
        try:
            return self[tensor.node_id]
        except KeyError:
            raise TapeError(f"no gradient recorded for {tensor!r}") from None

    def items_for(self, named: dict[str, Tensor]) -> Iterator[tuple[str, Tensor]]:
        """Yield (name, gradient) for named leaves, zeros when unseen."""
        for name, tensor in named.items():
            grad = self.get(tensor.node_id)
            if grad is None:
                grad = Tensor._wrap(np.zeros_like(tensor.data), requires_grad=False)
            yield name, grad


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Run the reverse sweep.

    Args:
        tape: Tape the loss was computed on
        loss: Scalar (single-element) tensor

    Returns:
        GradientMap with d(loss)/d(leaf) for every requires_grad leaf the
        tape saw; leaves that do not reach the loss get zeros

    Raises:
        TapeError: If loss is not scalar or is not on the tape
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.holds(loss):
        raise TapeError("loss is detached from the tape")

    cotangents: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}

    for node in reversed(tape.nodes):
        upstream = cotangents.get(node.output)
        if upstream is None:
            continue
        input_grads = node.backward(upstream)
        for node_id, grad in zip(node.inputs, input_grads):
            if node_id is None or grad is None:
                continue
            if node_id in cotangents:
                cotangents[node_id] = cotangents[node_id] + grad
            else:
                cotangents[node_id] = grad

    grads = GradientMap()
    for node_id, (shape, dtype) in tape.leaves.items():
        grad = cotangents.get(node_id)
        if grad is None:
            grad = np.zeros(shape, dtype=dtype)
        grads[node_id] = Tensor._wrap(
            np.array(grad, dtype=dtype).reshape(shape), requires_grad=False
        )
    if loss.node_id in tape.leaves:
        grads[loss.node_id] = Tensor._wrap(np.ones_like(loss.data), False)
    return grads
