"""Evaluation metrics: macro-F1, C-index, Kaplan-Meier and log-rank.

All functions take plain arrays; nothing here is on the autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
import pandas as pd
from scipy.stats import chi2 as chi2_dist

from .errors import ValidationError
from .logging import get_logger


logger = get_logger("metrics")


class MetricError(ValidationError):
    """Raised when a metric is undefined for its inputs."""

    pass


def macro_f1(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no
    predictions scores 0.

    Examples:
        >>> macro_f1([0, 0], [0, 1], 2)
        0.3333333333333333
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise MetricError(f"{preds.size} predictions for {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise MetricError(f"labels outside [0, {n_classes})")
    scores = []
    for cls in range(n_classes):
        tp = int(np.sum((preds == cls) & (labels == cls)))
        fp = int(np.sum((preds == cls) & (labels != cls)))
        fn = int(np.sum((preds != cls) & (labels == cls)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise MetricError("accuracy of an empty set")
    return float(np.mean(preds == labels))


def c_index(
    risks: Sequence[float], records: Sequence[tuple[float, int]]
) -> float:
    """Harrell's concordance over comparable pairs.

    A pair (i, j) is comparable when i had an event and time_i < time_j; it
    is concordant when risk_i > risk_j and counts one half on a risk tie.

    Args:
        risks: Predicted risk per subject (higher means earlier event)
        records: (time, event) per subject, event = 1 when observed

    Raises:
        MetricError: If no pair is comparable
    """
    risks = np.asarray(risks, dtype=np.float64)
    if len(records) != risks.size:
        raise MetricError(f"{risks.size} risks for {len(records)} records")
    times = np.asarray([r[0] for r in records], dtype=np.float64)
    events = np.asarray([r[1] for r in records], dtype=bool)

    comparable = events[:, None] & (times[:, None] < times[None, :])
    total = int(comparable.sum())
    if total == 0:
        raise MetricError("no comparable pairs for the C-index")
    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    score = np.sum(comparable & higher) + 0.5 * np.sum(comparable & tied)
    return float(score / total)


@dataclass(frozen=True)
class KaplanMeier:
    """Product-limit step function.

    Attributes:
        times: Distinct observed times, ascending
        survival: Estimated S(t) right after each time
        at_risk: Subjects at risk just before each time
        events: Events at each time
    """

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t: float) -> float:
        """S(t) of the step function (1 before the first time)."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"t": self.times, "S_hat": self.survival, "n_at_risk": self.at_risk}
        )


def km_curve(times: Sequence[float], events: Sequence[int]) -> KaplanMeier:
    """Kaplan-Meier estimate of the survival function.

    Raises:
        MetricError: If the group is empty or lengths differ
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    if times.size == 0:
        raise MetricError("Kaplan-Meier needs a non-empty group")
    if times.shape != events.shape:
        raise MetricError(f"{times.size} times for {events.size} event flags")

    distinct = np.unique(times)
    at_risk = np.array([np.sum(times >= t) for t in distinct], dtype=np.int64)
    deaths = np.array(
        [np.sum((times == t) & (events == 1)) for t in distinct], dtype=np.int64
    )
    survival = np.cumprod(1.0 - deaths / at_risk)
    return KaplanMeier(
        times=distinct, survival=survival, at_risk=at_risk, events=deaths
    )


@dataclass(frozen=True)
class LogRankResult:
    """Log-rank statistic with one degree of freedom.

    Attributes:
        chi2: (O - E)^2 / V for the first group
        p_value: Chi-square survival function at chi2
        observed: Events observed in the first group
        expected: Events expected in the first group under the null
        variance: Hypergeometric variance summed over event times
    """

    chi2: float
    p_value: float
    observed: float
    expected: float
    variance: float


def logrank_test(
    times_a: Sequence[float],
    events_a: Sequence[int],
    times_b: Sequence[float],
    events_b: Sequence[int],
) -> LogRankResult:
    """Compare two survival groups.

    Raises:
        MetricError: If either group is empty
    """
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a, dtype=np.int64)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b, dtype=np.int64)
    if ta.size == 0 or tb.size == 0:
        raise MetricError("log-rank test needs two non-empty groups")

    event_times = np.unique(np.concatenate([ta[ea == 1], tb[eb == 1]]))
    observed = expected = variance = 0.0
    for t in event_times:
        n_a = np.sum(ta >= t)
        n = n_a + np.sum(tb >= t)
        d_a = np.sum((ta == t) & (ea == 1))
        d = d_a + np.sum((tb == t) & (eb == 1))
        observed += d_a
        expected += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1)

    if variance <= 0.0:
        return LogRankResult(0.0, 1.0, float(observed), float(expected), 0.0)
    stat = (observed - expected) ** 2 / variance
    return LogRankResult(
        chi2=float(stat),
        p_value=float(chi2_dist.sf(stat, df=1)),
        observed=float(observed),
        expected=float(expected),
        variance=float(variance),
    )


def logrank_p(
    group_a: tuple[Sequence[float], Sequence[int]],
    group_b: tuple[Sequence[float], Sequence[int]],
) -> tuple[float, float]:
    """(chi2, p) for two groups given as (times, events) pairs."""
    result = logrank_test(*group_a, *group_b)
    return result.chi2, result.p_value


def median_split(risks: Sequence[float]) -> np.ndarray:
    """True for subjects whose risk is above the median (high-risk group)."""
    risks = np.asarray(risks, dtype=np.float64)
    return risks > np.median(risks)


def write_km_csv(path: Union[str, Path], curves: dict[str, KaplanMeier]) -> Path:
    """Write one or more curves as rows of (group, t, S_hat, n_at_risk)."""
    frames = []
    for group, curve in curves.items():
        frame = curve.to_frame()
        frame.insert(0, "group", group)
        frames.append(frame)
    path = Path(path)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    return path


def plot_km_svg(
    path: Union[str, Path],
    curves: dict[str, KaplanMeier],
    p_value: Optional[float] = None,
) -> Path:
    """Draw curves as step functions into an SVG file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for group, curve in curves.items():
        xs = np.concatenate([[0.0], curve.times])
        ys = np.concatenate([[1.0], curve.survival])
        ax.step(xs, ys, where="post", label=group)
    if p_value is not None:
        ax.text(0.02, 0.05, f"log-rank p = {p_value:.4g}", transform=ax.transAxes)
    ax.set_xlabel("Time bin")
    ax.set_ylabel("Survival probability")
    ax.set_ylim(0.0, 1.05)
    ax.grid(color="grey", linestyle="--", linewidth=0.5)
    ax.legend()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.debug(f"Wrote Kaplan-Meier plot to {path}")
    return path


@dataclass
class RiskGroupComparison:
    """Kaplan-Meier curves of the two halves of a median risk split."""

    n_high: int
    n_low: int
    curves: dict[str, KaplanMeier]
    logrank: LogRankResult
    csv_path: Path
    svg_path: Path


def compare_risk_groups(
    risks_path: Union[str, Path],
    records_path: Union[str, Path],
    out: Union[str, Path],
) -> RiskGroupComparison:
    """Split subjects at the median predicted risk and compare the halves.

    Args:
        risks_path: CSV with columns slide_id, risk
        records_path: CSV with columns slide_id, time_bin, censor
        out: Output path; the curves go to its .csv and .svg siblings

    Raises:
        MetricError: On missing columns, no matching slides, or a split
            that leaves one half empty
    """
    risks = pd.read_csv(risks_path, dtype={"slide_id": str})
    records = pd.read_csv(records_path, dtype={"slide_id": str})
    for frame, columns, path in (
        (risks, {"slide_id", "risk"}, risks_path),
        (records, {"slide_id", "time_bin", "censor"}, records_path),
    ):
        missing = columns - set(frame.columns)
        if missing:
            raise MetricError(f"{path} lacks columns {sorted(missing)}")
    merged = records[["slide_id", "time_bin", "censor"]].merge(
        risks[["slide_id", "risk"]], on="slide_id", how="inner"
    )
    if merged.empty:
        raise MetricError("no slide_id appears in both files")

    high = median_split(merged["risk"].to_numpy())
    if high.all() or not high.any():
        raise MetricError("median risk split leaves one group empty")
    times = merged["time_bin"].to_numpy(dtype=np.float64)
    events = 1 - merged["censor"].to_numpy(dtype=np.int64)
    curves = {
        "high": km_curve(times[high], events[high]),
        "low": km_curve(times[~high], events[~high]),
    }
    result = logrank_test(times[high], events[high], times[~high], events[~high])
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return RiskGroupComparison(
        n_high=int(high.sum()),
        n_low=int((~high).sum()),
        curves=curves,
        logrank=result,
        csv_path=write_km_csv(out.with_suffix(".csv"), curves),
        svg_path=plot_km_svg(out.with_suffix(".svg"), curves, result.p_value),
    )
