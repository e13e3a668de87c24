"""Fold-wise evaluation of checkpoints.

Slides are dealt into k folds by seed (stratified by label for
classification). `evaluate` scores one checkpoint on every fold;
`cross_validate` trains a fresh model per fold and scores it on the
held-out slides. Both report the per-fold metric with its mean and
standard deviation across folds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
import pandas as pd
from scipy.special import expit

from ..config import NetworkConfig
from ..config import Task
from ..config import TrainConfig
from ..core.rng import Rng
from ..logging import get_logger
from ..metrics import KaplanMeier
from ..metrics import LogRankResult
from ..metrics import MetricError
from ..metrics import accuracy
from ..metrics import c_index
from ..metrics import km_curve
from ..metrics import logrank_test
from ..metrics import macro_f1
from ..metrics import median_split
from ..metrics import plot_km_svg
from ..metrics import write_km_csv
from .data import Dataset
from .parallel import SlidePool
from .train import Checkpoint
from .train import CheckpointError
from .train import head_outputs
from .train import init_checkpoint
from .train import slide_logits
from .train import train


logger = get_logger("evaluate")


@dataclass
class FoldResult:
    """Metric of one fold.

    Attributes:
        fold: 0-based fold index
        size: Slides in the fold
        value: Macro-F1 or C-index (NaN when undefined for the fold)
        accuracy: Classification accuracy (None for survival)
    """

    fold: int
    size: int
    value: float
    accuracy: Optional[float] = None


@dataclass
class Predictions:
    """Head outputs of every slide, in dataset order."""

    logits: np.ndarray

    @property
    def classes(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    @property
    def risks(self) -> np.ndarray:
        return expit(self.logits).sum(axis=1)


@dataclass
class EvalReport:
    """Everything an evaluation produced."""

    task: Task
    metric: str
    folds: list[FoldResult]
    overall: float
    predictions: Predictions
    logrank: Optional[LogRankResult] = None
    km: dict[str, KaplanMeier] = field(default_factory=dict)
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return _finite_stat(self.folds, np.mean)

    @property
    def std(self) -> float:
        return _finite_stat(self.folds, np.std)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "fold": str(fold.fold),
                "n": fold.size,
                "metric": self.metric,
                "value": fold.value,
                "accuracy": fold.accuracy,
            }
            for fold in self.folds
        ]
        n_total = sum(fold.size for fold in self.folds)
        for name, value in (("mean", self.mean), ("std", self.std)):
            rows.append(
                {"fold": name, "n": n_total, "metric": self.metric, "value": value}
            )
        rows.append(
            {
                "fold": "overall",
                "n": n_total,
                "metric": self.metric,
                "value": self.overall,
            }
        )
        return pd.DataFrame(rows, columns=["fold", "n", "metric", "value", "accuracy"])


def _finite_stat(folds: Sequence[FoldResult], stat) -> float:
    values = [f.value for f in folds if math.isfinite(f.value)]
    return float(stat(values)) if values else float("nan")


def fold_assignment(
    n: int, k: int, seed: int = 0, labels: Optional[Sequence[int]] = None
) -> np.ndarray:
    """Fold index of every slide.

    Without labels the slides are shuffled and dealt round-robin. With labels
    each class is shuffled on its own and dealt continuing where the previous
    class stopped, so fold sizes differ by at most one and classes spread
    evenly.

    Examples:
        >>> np.bincount(fold_assignment(20, 5))
        array([4, 4, 4, 4, 4])

    Raises:
        MetricError: If k < 2 or k > n
    """
    if not 2 <= k <= n:
        raise MetricError(f"need 2 <= folds <= slides, got {k} folds for {n}")
    rng = Rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    if labels is None:
        order = rng.permutation(n)
        assignment[order] = np.arange(n) % k
        return assignment

    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise MetricError(f"{labels.size} labels for {n} slides")
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.child(int(cls)).permutation(members.size)]
        assignment[members] = (offset + np.arange(members.size)) % k
        offset += members.size
    return assignment


def predict(checkpoint: Checkpoint, dataset: Dataset, workers: int = 1) -> Predictions:
    """Head logits of every slide (no tape is recorded)."""
    model, head = checkpoint.model, checkpoint.head
    with SlidePool(workers) as pool:
        logits = pool.map(
            lambda slide: slide_logits(model, head, slide.image).numpy(),
            dataset.slides,
        )
    return Predictions(logits=np.stack(logits))


def _check_fit(checkpoint: Checkpoint, dataset: Dataset) -> None:
    outputs = checkpoint.head.outputs
    if checkpoint.task == Task.CLASSIFY:
        needed = max(dataset.labels) + 1
        what = "classes"
    else:
        needed = max(record.t for record in dataset.records)
        what = "time bins"
    if needed > outputs:
        raise CheckpointError(
            f"checkpoint/dataset mismatch: head has {outputs} outputs, "
            f"dataset needs {needed} {what}"
        )


def _fold_metric(
    task: Task,
    predictions: Predictions,
    dataset: Dataset,
    idx: np.ndarray,
    n_classes: int,
) -> tuple[float, Optional[float]]:
    if task == Task.CLASSIFY:
        preds = predictions.classes[idx]
        labels = np.asarray(dataset.labels)[idx]
        return macro_f1(preds, labels, n_classes), accuracy(preds, labels)
    records = [(dataset.records[i].t, dataset.records[i].event) for i in idx]
    try:
        return c_index(predictions.risks[idx], records), None
    except MetricError as e:
        logger.warning(f"C-index undefined on a fold of {idx.size}: {e}")
        return float("nan"), None


def _survival_groups(
    report: EvalReport, dataset: Dataset, out_dir: Optional[Path]
) -> None:
    risks = report.predictions.risks
    high = median_split(risks)
    times = np.asarray([r.t for r in dataset.records], dtype=np.float64)
    events = np.asarray([r.event for r in dataset.records], dtype=np.int64)
    if high.all() or not high.any():
        logger.warning("Median risk split left one group empty; no log-rank test")
        return
    report.km = {
        "high": km_curve(times[high], events[high]),
        "low": km_curve(times[~high], events[~high]),
    }
    report.logrank = logrank_test(
        times[high], events[high], times[~high], events[~high]
    )
    logger.info(f"Log-rank high vs low risk: p = {report.logrank.p_value:.4g}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.paths["km_csv"] = write_km_csv(out_dir / "km.csv", report.km)
        report.paths["km_svg"] = plot_km_svg(
            out_dir / "km.svg", report.km, report.logrank.p_value
        )


def _write_report(report: EvalReport, dataset: Dataset, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    report.paths["report"] = out_dir / "report.csv"
    report.to_frame().to_csv(report.paths["report"], index=False)
    frame = dataset.records_frame()
    frame["prediction"] = report.predictions.classes
    frame["risk"] = report.predictions.risks
    report.paths["predictions"] = out_dir / "predictions.csv"
    frame.to_csv(report.paths["predictions"], index=False)


def _score(
    task: Task,
    predictions: Predictions,
    dataset: Dataset,
    assignment: np.ndarray,
    n_classes: int,
    out_dir: Optional[Path],
) -> EvalReport:
    results = []
    for fold in range(int(assignment.max()) + 1):
        idx = np.flatnonzero(assignment == fold)
        value, acc = _fold_metric(task, predictions, dataset, idx, n_classes)
        results.append(FoldResult(fold=fold, size=idx.size, value=value, accuracy=acc))
    everything = np.arange(len(dataset))
    overall, _ = _fold_metric(task, predictions, dataset, everything, n_classes)

    report = EvalReport(
        task=task,
        metric="macro_f1" if task == Task.CLASSIFY else "c_index",
        folds=results,
        overall=overall,
        predictions=predictions,
    )
    if task == Task.SURVIVE:
        _survival_groups(report, dataset, out_dir)
    if out_dir is not None:
        _write_report(report, dataset, out_dir)
    logger.info(
        f"{report.metric}: {report.mean:.4f} +/- {report.std:.4f} over "
        f"{len(results)} folds (overall {report.overall:.4f})"
    )
    return report


def evaluate(
    checkpoint: Checkpoint,
    dataset: Dataset,
    folds: int = 5,
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> EvalReport:
    """Score a checkpoint on every fold of a dataset.

    Args:
        checkpoint: Trained network and head
        dataset: Slides to score
        folds: Number of folds
        seed: Seed of the fold assignment
        out_dir: Where report.csv, predictions.csv and (survival) km.csv and
            km.svg are written
        workers: Threads for the forward passes

    Returns:
        EvalReport with macro-F1 (classification) or C-index (survival)

    Raises:
        CheckpointError: If the head does not fit the dataset's labels
        MetricError: If the fold count does not fit the dataset
    """
    _check_fit(checkpoint, dataset)
    task = checkpoint.task
    labels = dataset.labels if task == Task.CLASSIFY else None
    assignment = fold_assignment(len(dataset), folds, seed, labels)
    predictions = predict(checkpoint, dataset, workers)
    return _score(
        task,
        predictions,
        dataset,
        assignment,
        checkpoint.head.outputs,
        Path(out_dir) if out_dir is not None else None,
    )


def cross_validate(
    config: NetworkConfig,
    dataset: Dataset,
    tc: TrainConfig,
    folds: int = 5,
    seed: int = 0,
    dtype=np.float64,
    out_dir: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """Train on k-1 folds and score the held-out fold, k times."""
    task = dataset.task
    out_dir = Path(out_dir) if out_dir is not None else None
    labels = dataset.labels if task == Task.CLASSIFY else None
    assignment = fold_assignment(len(dataset), folds, seed, labels)
    outputs = head_outputs(task, dataset.spec)

    logits = np.zeros((len(dataset), outputs))
    for fold in range(folds):
        held_out = np.flatnonzero(assignment == fold)
        kept = np.flatnonzero(assignment != fold)
        logger.info(f"Fold {fold + 1}/{folds}: train {kept.size}, test {held_out.size}")
        start = init_checkpoint(config, task, outputs, tc.seed, dtype)
        fold_dir = out_dir / f"fold-{fold}" if out_dir is not None else None
        trained = train(start, dataset.subset(kept), tc, out_dir=fold_dir).checkpoint
        logits[held_out] = predict(trained, dataset.subset(held_out), tc.workers).logits
    predictions = Predictions(logits=logits)
    return _score(task, predictions, dataset, assignment, outputs, out_dir)
