"""Finite-difference gradient checking.

Compares tape gradients against central differences for primitives and
composites alike.
"""

from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import Optional
from typing import Sequence

import numpy as np

from .rng import Rng
from .tensor import Tape
from .tensor import Tensor
from .tensor import backward


# Coordinates where both gradients are below this are skipped
NEGLIGIBLE_GRAD = 1e-10


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison.

    Attributes:
        checked: Number of coordinates compared
        skipped: Coordinates skipped because both gradients were negligible
        failures: (input index, flat coordinate, analytic, numeric) per failure
        max_rel_err: Largest relative error among compared coordinates
        rtol: Tolerance the comparison used
    """

    checked: int = 0
    skipped: int = 0
    failures: list[tuple[int, int, float, float]] = field(default_factory=list)
    max_rel_err: float = 0.0
    rtol: float = 1e-6

    @property
    def pass_fraction(self) -> float:
        if self.checked == 0:
            return 1.0
        return 1.0 - len(self.failures) / self.checked

    def passed(self, min_fraction: float = 1.0) -> bool:
        return self.pass_fraction >= min_fraction


def relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale == 0.0:
        return 0.0
    return abs(analytic - numeric) / scale


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    rtol: float = 1e-6,
    sample: Optional[int] = None,
    rng: Optional[Rng] = None,
) -> GradCheckReport:
    """Check d fn(*inputs) / d inputs against central differences.

    Args:
        fn: Function of the input tensors returning a scalar tensor
        inputs: Leaf tensors with requires_grad=True
        step: Finite-difference step
        rtol: Relative tolerance per coordinate
        sample: If given, check only this many randomly chosen coordinates
        rng: Stream used to choose the sample

    Returns:
        GradCheckReport
    """
    with Tape() as tape:
        loss = fn(*inputs)
    grads = backward(tape, loss)
    analytic = [grads.wrt(t).data.reshape(-1) for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    if sample is not None and sample < len(coords):
        chooser = rng or Rng(0)
        picked = chooser.permutation(len(coords))[:sample]
        coords = [coords[k] for k in sorted(picked)]

    report = GradCheckReport(rtol=rtol)
    for i, j in coords:
        numeric = _central_difference(fn, inputs, i, j, step)
        exact = float(analytic[i][j])
        if max(abs(exact), abs(numeric)) < NEGLIGIBLE_GRAD:
            report.skipped += 1
            continue
        err = relative_error(exact, numeric)
        report.checked += 1
        report.max_rel_err = max(report.max_rel_err, err)
        if err > rtol:
            report.failures.append((i, j, exact, numeric))
    return report


def _central_difference(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    index: int,
    coord: int,
    step: float,
) -> float:
    values = []
    for sign in (1.0, -1.0):
        probe = inputs[index].numpy().reshape(-1)
        probe[coord] += sign * step
        shifted = list(inputs)
        shifted[index] = Tensor(probe.reshape(inputs[index].shape))
        values.append(fn(*shifted).item())
    return (values[0] - values[1]) / (2.0 * step)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize a tensor with fixed random weights (keeps every path live)."""
    from . import ops

    return ops.sum(ops.mul(out, Tensor(weights, dtype=out.dtype)))
