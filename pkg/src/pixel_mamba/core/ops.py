"""Differentiable primitives.

Every primitive computes its forward value with numpy and hands
apply_op a closure computing the vector-Jacobian product. Composite
operations (rms_norm, mean) are written in terms of the primitives so
they inherit gradient correctness.
"""

from __future__ import annotations

from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
from scipy.special import expit

from .tensor import ShapeError
from .tensor import Tensor
from .tensor import apply_op
from .tensor import as_tensor


Operand = Union[Tensor, float, int, np.ndarray]
Axis = Optional[Union[int, tuple[int, ...]]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    """Promote Python/numpy constants to tensors of the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --- elementwise arithmetic -------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", a.data + b.data, (a, b), backward_fn)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", a.data - b.data, (a, b), backward_fn)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op("mul", a.data * b.data, (a, b), backward_fn)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return apply_op("div", out, (a, b), backward_fn)


def neg(x: Tensor) -> Tensor:
    return apply_op("neg", -x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**exponent for a constant exponent."""

    def backward_fn(g):
        return (g * exponent * np.power(x.data, exponent - 1),)

    return apply_op("power", np.power(x.data, exponent), (x,), backward_fn)


# --- elementwise functions --------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return apply_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return apply_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return apply_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    out = np.logaddexp(0.0, x.data)
    return apply_op("softplus", out, (x,), lambda g: (g * expit(x.data),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = expit(x.data)

    def backward_fn(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return apply_op("silu", x.data * s, (x,), backward_fn)


# --- reductions -------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        return (_expand_reduced(g, x.shape, axis, keepdims),)

    return apply_op("sum", np.asarray(out), (x,), backward_fn)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along one axis, shifted by the max for stability."""
    peak = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)
    softmax = shifted / total

    def backward_fn(g):
        return (np.expand_dims(g, axis) * softmax,)

    return apply_op("logsumexp", out, (x,), backward_fn)


def cumsum(x: Tensor, axis: int = 0) -> Tensor:
    def backward_fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return apply_op("cumsum", np.cumsum(x.data, axis=axis), (x,), backward_fn)


# --- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (vectors promoted as numpy does)."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: expected 1-D/2-D operands, got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    a2 = a.data.reshape(1, -1) if a.ndim == 1 else a.data
    b2 = b.data.reshape(-1, 1) if b.ndim == 1 else b.data
    out2 = a2 @ b2

    def backward_fn(g):
        g2 = np.reshape(g, out2.shape)
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb

    out = out2
    if a.ndim == 1 and b.ndim == 1:
        out = out2.reshape(())
    elif a.ndim == 1:
        out = out2.reshape(-1)
    elif b.ndim == 1:
        out = out2.reshape(-1)
    return apply_op("matmul", out, (a, b), backward_fn)


# --- structural -------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return apply_op("reshape", out, (x,), lambda g: (np.reshape(g, x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes).copy()
    return apply_op("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; use take() for index arrays."""
    out = np.array(x.data[key], copy=True)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        grad[key] = g
        return (grad,)

    return apply_op("getitem", out, (x,), backward_fn)


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather entries along an axis; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return apply_op("take", out, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return apply_op("concat", out, tuple(tensors), backward_fn)


def flip(x: Tensor, axis: int = 0) -> Tensor:
    """Reverse the order of entries along an axis."""
    out = np.flip(x.data, axis=axis).copy()
    return apply_op("flip", out, (x,), lambda g: (np.flip(g, axis=axis),))


# --- layers used by the Mamba block -------------------------------------------


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gamma over the channel (last) axis.

    Raises:
        ShapeError: If gamma does not match the channel extent
    """
    if gamma.shape != (x.shape[-1],):
        raise ShapeError(
            f"rms_norm: gamma shape {gamma.shape} != channels ({x.shape[-1]},)"
        )
    if eps <= 0:
        raise ShapeError(f"rms_norm: eps must be positive, got {eps}")
    mean_square = mean(mul(x, x), axis=-1, keepdims=True)
    inv_rms = power(add(mean_square, eps), -0.5)
    return mul(mul(x, inv_rms), gamma)


def causal_depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel causal convolution along the sequence axis.

    y[t, c] = sum_j kernel[c, j] * x[t - K + 1 + j, c], zero left padding.

    Args:
        x: Sequence tensor [len, C]
        kernel: Taps [C, K]

    Raises:
        ShapeError: If the channel extents differ
    """
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(
            f"conv1d: expected x [len, C] and kernel [C, K], got {x.shape}, "
            f"{kernel.shape}"
        )
    length = x.shape[0]
    width = kernel.shape[1]
    padded = np.concatenate(
        [np.zeros((width - 1, x.shape[1]), dtype=x.dtype), x.data], axis=0
    )
    out = np.zeros_like(x.data)
    for j in range(width):
        out += kernel.data[:, j] * padded[j : j + length]

    def backward_fn(g):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.empty_like(kernel.data)
        for j in range(width):
            grad_padded[j : j + length] += kernel.data[:, j] * g
            grad_kernel[:, j] = np.sum(g * padded[j : j + length], axis=0)
        return grad_padded[width - 1 :], grad_kernel

    return apply_op("causal_conv1d", out, (x, kernel), backward_fn)


def zeros(shape: Sequence[int], dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype))


def ones(shape: Sequence[int], dtype=np.float64) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype))
