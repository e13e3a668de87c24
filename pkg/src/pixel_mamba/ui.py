"""Rich renderings of traces, training runs and evaluation reports."""

from __future__ import annotations

from typing import Optional
from typing import Sequence

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from .fusion import FusionRecord
from .network import LayerShape
from .network import memory_law


BRAND_COLOR = "#d4a574"
SUCCESS_COLOR = "green"
ERROR_COLOR = "red"
DIM_COLOR = "dim"


def _pair(values: tuple[int, int]) -> str:
    return f"{values[0]}x{values[1]}"


def _number(value) -> str:
    if value is None or value != value:
        return "-"
    return f"{value:.4f}"


def shape_table(trace: Sequence[LayerShape], title: str = "Shape trace") -> Table:
    """One row per layer: regions, grid, channels, rf and token counts."""
    table = Table(title=title, title_style=f"bold {BRAND_COLOR}")
    for column in ("Layer", "Regions", "Grid", "Channels", "Token", "k"):
        table.add_column(column, justify="right")
    table.add_column("Tokens in", justify="right")
    table.add_column("Tokens out", justify="right")
    table.add_column("Peak live", justify="right", style=DIM_COLOR)
    for shape in trace:
        table.add_row(
            str(shape.layer),
            str(shape.n),
            _pair(shape.grid),
            str(shape.channels),
            _pair(shape.rf),
            str(shape.k),
            f"{shape.tokens_in:,}",
            f"{shape.tokens_out:,}",
            f"{shape.peak_live:,}",
        )
    return table


def fusion_table(records: Sequence[FusionRecord]) -> Table:
    """Merges per layer with the similarity of the weakest merged pair."""
    table = Table(title="Fusion trace", title_style=f"bold {BRAND_COLOR}")
    table.add_column("Layer", justify="right")
    table.add_column("n before", justify="right")
    table.add_column("k", justify="right")
    table.add_column("n after", justify="right")
    table.add_column("Min similarity", justify="right")
    for record in records:
        weakest = f"{min(record.similarities):.4f}" if record.similarities else "-"
        table.add_row(
            str(record.layer),
            str(record.n_before),
            str(record.k),
            str(record.n_after),
            weakest,
        )
    return table


def memory_summary(trace: Sequence[LayerShape]) -> str:
    bounded, shrinking = memory_law(list(trace))
    initial = trace[0].tokens_in if trace else 0
    peak = max((shape.peak_live for shape in trace), default=0)

    def mark(ok: bool) -> str:
        return f"[{SUCCESS_COLOR}]yes[/]" if ok else f"[{ERROR_COLOR}]no[/]"

    return (
        f"Initial length M = {initial:,}, peak live tokens = {peak:,}\n"
        f"Peak within 2M: {mark(bounded)}\n"
        f"Length non-increasing across layers: {mark(shrinking)}"
    )


def eval_table(report) -> Table:
    """Per-fold metric plus mean, std and the pooled value."""
    table = Table(
        title=f"Evaluation ({report.metric})", title_style=f"bold {BRAND_COLOR}"
    )
    table.add_column("Fold", justify="right")
    table.add_column("Slides", justify="right")
    table.add_column(report.metric, justify="right")
    if report.folds and report.folds[0].accuracy is not None:
        table.add_column("Accuracy", justify="right")
    for row in report.to_frame().itertuples(index=False):
        cells = [str(row.fold), str(row.n), _number(row.value)]
        if len(table.columns) == 4:
            cells.append(_number(row.accuracy))
        table.add_row(*cells)
    return table


def train_panel(result) -> Panel:
    """Summary of a finished training run."""
    lines = [
        f"Final loss: [bold]{result.final_loss:.6f}[/bold]",
        f"Steps: {result.steps:,}  Updates: {result.updates:,}",
    ]
    if result.curve_path is not None:
        lines.append(f"Loss curve: {result.curve_path}")
    if result.checkpoint_path is not None:
        lines.append(f"Checkpoint: {result.checkpoint_path}")
    return Panel.fit(
        "\n".join(lines), title="Training done", border_style=SUCCESS_COLOR
    )


def error_panel(error: BaseException, hint: Optional[str] = None) -> Panel:
    body = f"[bold red]{type(error).__name__}:[/bold red]\n\n{error}"
    if hint:
        body += f"\n\n[dim]{hint}[/dim]"
    return Panel.fit(body, border_style=ERROR_COLOR, title="Error")


def print_trace(
    console: Console,
    trace: Sequence[LayerShape],
    fusion: Optional[Sequence[FusionRecord]] = None,
) -> None:
    console.print(shape_table(trace))
    console.print(memory_summary(trace))
    if fusion:
        console.print(fusion_table(fusion))
