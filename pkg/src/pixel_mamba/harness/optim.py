"""AdamW with decoupled weight decay and the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from ..core.tensor import Tensor


def cosine_lr(update: int, total: int, base: float) -> float:
    """base * (1 + cos(pi * update / total)) / 2, decaying from base to 0.

    Examples:
        >>> cosine_lr(0, 10, 4e-4)
        0.0004
        >>> cosine_lr(5, 10, 4e-4)  # doctest: +ELLIPSIS
        0.0002...
    """
    if total <= 0:
        return base
    progress = min(max(update, 0), total) / total
    return base * (1.0 + math.cos(math.pi * progress)) / 2.0


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only; norms, biases, A_log and the
    CLS vector are left alone."""
    return value.ndim >= 2 and not name.endswith("A_log")


class AdamW:
    """Adaptive-moment optimizer whose weight decay is applied to the
    parameters directly rather than folded into the gradient.

    Parameters are immutable tensors, so step returns fresh tensors and the
    caller swaps them in.
    """

    def __init__(
        self,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: dict[str, Tensor],
        grads: dict[str, np.ndarray],
        lr: float,
    ) -> dict[str, Tensor]:
        """One update; parameters without a gradient are carried over as is."""
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        updated = {}
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                updated[name] = param
                continue
            m = self.m.get(name, np.zeros_like(grad))
            v = self.v.get(name, np.zeros_like(grad))
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.m[name], self.v[name] = m, v

            value = param.data
            if self.weight_decay and decays(name, value):
                value = value - lr * self.weight_decay * value
            value = value - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            updated[name] = Tensor(value, requires_grad=True, dtype=param.dtype)
        return updated
