"""Task heads: classification and discrete-hazard survival.

The survival head emits one logit per time bin. Hazards are
h(t) = sigmoid(z_t) and the survival function is S(t) = prod_{s<=t} (1 - h(s)).
The negative log-likelihood of a record (t, c) is

    censored   (c = 1): -log S(t)
    uncensored (c = 0): -log S(t - 1) - log h(t)

evaluated through softplus so saturated logits stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import ops
from .core.rng import Rng
from .core.tensor import Tensor
from .errors import ValidationError


class HeadError(ValidationError):
    """Raised for invalid head inputs (hazards outside (0, 1), bad shapes)."""

    pass


class RecordError(ValidationError):
    """Raised for labels or survival records that do not fit the head."""

    pass


@dataclass(frozen=True)
class SurvivalRecord:
    """Observed outcome of one slide.

    Attributes:
        t: Discrete time bin, 1-based
        c: 1 if right-censored, 0 if the event was observed
    """

    t: int
    c: int

    def __post_init__(self):
        if self.t < 1:
            raise RecordError(f"time bin must be >= 1, got {self.t}")
        if self.c not in (0, 1):
            raise RecordError(f"censor flag must be 0 or 1, got {self.c}")

    @property
    def event(self) -> int:
        return 1 - self.c


@dataclass
class HeadParams:
    """Linear head emb @ weight + bias."""

    weight: Tensor
    bias: Tensor

    @property
    def outputs(self) -> int:
        return self.weight.shape[1]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "head.weight", self.weight
        yield "head.bias", self.bias

    @classmethod
    def init(
        cls, channels: int, outputs: int, rng: Rng, dtype=np.float64
    ) -> "HeadParams":
        weight = rng.normal((channels, outputs), channels**-0.5)
        return cls(
            weight=Tensor(weight, requires_grad=True, dtype=dtype),
            bias=Tensor(np.zeros(outputs), requires_grad=True, dtype=dtype),
        )


def classify_head(embedding: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Class logits for a slide embedding."""
    return ops.add(ops.matmul(embedding, weight), bias)


def cross_entropy(logits: Tensor, label: int, smoothing: float = 0.0) -> Tensor:
    """Softmax cross-entropy, optionally against a label-smoothed target.

    Examples:
        >>> cross_entropy(Tensor([1.0, 2.0, 3.0]), 2).item()  # doctest: +ELLIPSIS
        0.4076...

    Raises:
        RecordError: If label is out of range
    """
    classes = logits.shape[-1]
    if not 0 <= label < classes:
        raise RecordError(f"label {label} outside [0, {classes})")
    lse = ops.logsumexp(logits)
    nll = ops.sub(lse, logits[label])
    if smoothing == 0.0:
        return nll
    uniform = ops.sub(lse, ops.mean(logits))
    return ops.add(ops.mul(nll, 1.0 - smoothing), ops.mul(uniform, smoothing))


def hazards(logits: Tensor) -> Tensor:
    return ops.sigmoid(logits)


def hazard_to_survival(h: Tensor) -> Tensor:
    """S(t) = prod_{s<=t} (1 - h(s)).

    Raises:
        HeadError: If any hazard lies outside (0, 1)
    """
    if np.any(h.data <= 0.0) or np.any(h.data >= 1.0):
        raise HeadError("hazards must lie strictly inside (0, 1)")
    return ops.exp(ops.cumsum(ops.log(ops.sub(1.0, h)), axis=0))


@dataclass
class HazardOutput:
    """Hazard logits of one slide with derived views."""

    logits: Tensor

    @property
    def hazards(self) -> np.ndarray:
        return expit(self.logits.data)

    @property
    def survival(self) -> np.ndarray:
        return np.exp(np.cumsum(-np.logaddexp(0.0, self.logits.data)))

    @property
    def risk(self) -> float:
        return risk_score(self.logits)


def survival_nll(logits: Tensor, record: SurvivalRecord) -> Tensor:
    """Negative log-likelihood of one survival record.

    Raises:
        RecordError: If the record's time bin exceeds the logit count
    """
    bins = logits.shape[0]
    if record.t > bins:
        raise RecordError(f"time bin {record.t} outside 1..{bins}")
    # -log(1 - h_s) = softplus(z_s) for the bins survived
    survived = record.t if record.c == 1 else record.t - 1
    mask = np.zeros(bins)
    mask[:survived] = 1.0
    loss = ops.sum(ops.mul(ops.softplus(logits), mask))
    if record.c == 0:
        # -log h_t = softplus(-z_t)
        loss = ops.add(loss, ops.softplus(ops.neg(logits[record.t - 1])))
    return loss


def survival_batch_nll(
    logits: Sequence[Tensor], records: Sequence[SurvivalRecord]
) -> Tensor:
    """Sum of survival_nll over records."""
    if len(logits) != len(records) or not records:
        raise RecordError(f"{len(logits)} outputs for {len(records)} records")
    total = survival_nll(logits[0], records[0])
    for z, record in zip(logits[1:], records[1:]):
        total = ops.add(total, survival_nll(z, record))
    return total


def risk_score(logits: Tensor) -> float:
    """Cumulative hazard sum_t h(t); larger means earlier expected event."""
    return float(np.sum(expit(logits.data)))
