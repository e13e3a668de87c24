"""CLI entry point for Pixel-Mamba.

This module provides the command-line interface for:
- Drawing synthetic slide datasets
- Training and evaluating networks from .cfg files
- Inspecting serialization, shape traces and fusion traces
- Kaplan-Meier curves with a log-rank test
- Viewing and managing logs

Exit codes: 0 on success, 2 on validation errors, 3 on numeric failures.
"""

import functools
import sys
from pathlib import Path
from typing import Optional

import click


try:
    from . import __version__
except ImportError:
    __version__ = "0.0.0-dev"

_console = None


def _get_console():
    """Lazy console initialization to avoid Rich import-time cost."""
    global _console
    if _console is None:
        from rich.console import Console

        _console = Console()
    return _console


def _get_logger():
    """Lazy logger initialization to avoid import-time performance hit."""
    from .logging import get_logger

    return get_logger("cli")


def _reports_errors(command):
    """Turn package errors into an error panel and the mapped exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        from .errors import PixelMambaError
        from .errors import exit_code_for

        try:
            return command(*args, **kwargs)
        except PixelMambaError as e:
            _get_logger().error(f"{command.__name__} failed: {e}", exc_info=True)
            from .ui import error_panel

            _get_console().print(
                error_panel(e, hint="Check logs: pixel-mamba logs show")
            )
            sys.exit(exit_code_for(e))

    return wrapper


def _parse_dims(text: str) -> tuple[int, int]:
    from .serialization import ScanWindow

    window = ScanWindow.parse(text)
    return window.h, window.w


def _settings(ctx: click.Context):
    return ctx.obj["settings"]


@click.group()
@click.version_option(version=__version__, prog_name="pixel-mamba")
@click.option("--seed", type=int, default=None, help="Seed for all randomness")
@click.option(
    "--dtype",
    type=click.Choice(["float64", "float32"]),
    default=None,
    help="Floating-point precision (default: float64)",
)
@click.option(
    "--workers", type=int, default=None, help="Threads for per-slide passes"
)
@click.option(
    "--verbose", "-v", is_flag=True, help="Mirror log records to the terminal"
)
@click.pass_context
def cli(
    ctx: click.Context,
    seed: Optional[int],
    dtype: Optional[str],
    workers: Optional[int],
    verbose: bool,
):
    """Pixel-Mamba - hierarchical state-space modelling of gigapixel images.

    Settings resolve as: flag > environment (PIXELMAMBA_SEED,
    PIXELMAMBA_DTYPE, PIXELMAMBA_WORKERS) > ~/.pixel-mamba/settings.yaml >
    default.
    """
    from .config import ConfigError
    from .config import ConfigManager

    if verbose:
        from .logging import enable_console

        enable_console()
    ctx.ensure_object(dict)
    try:
        ctx.obj["settings"] = ConfigManager().get_effective_settings(
            seed=seed, dtype=dtype, workers=workers
        )
    except ConfigError as e:
        from .ui import error_panel

        _get_console().print(error_panel(e))
        sys.exit(e.exit_code)


@cli.command()
@click.option(
    "--spec",
    "spec_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="YAML synth spec (default: built-in 64x64, 4 classes)",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="Dataset directory to write",
)
@click.option("--n-slides", type=int, default=16, help="Number of slides (default: 16)")
@click.option(
    "--task",
    type=click.Choice(["classify", "survive"]),
    default="classify",
    help="Task recorded in the manifest",
)
@click.pass_context
@_reports_errors
def synth(ctx, spec_path: Optional[Path], out: Path, n_slides: int, task: str):
    """Draw a synthetic slide dataset.

    The --seed flag replaces the seed stored in the synth spec.

    Examples:
        pixel-mamba --seed 7 synth --out data/
        pixel-mamba synth --spec spec.yaml --out data/ --task survive
    """
    from .config import SynthSpec
    from .config import Task
    from .config import load_synth_spec
    from .harness.data import synth_dataset

    spec = load_synth_spec(spec_path) if spec_path else SynthSpec()
    spec = spec.model_copy(update={"seed": _settings(ctx).seed})
    dataset = synth_dataset(spec, n_slides, Task(task))
    dataset.save(out)
    _get_console().print(
        f"[green]✓ Wrote {len(dataset)} slides "
        f"({spec.height}x{spec.width}, {spec.n_classes} classes) to {out}[/green]"
    )


@cli.command()
@click.option("--config", "config_ref", required=True, help="Bundled name or .cfg path")
@click.option(
    "--data",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    required=True,
    help="Dataset directory",
)
@click.option(
    "--task",
    type=click.Choice(["classify", "survive"]),
    default=None,
    help="Task (default: the dataset's)",
)
@click.option(
    "--preset",
    type=click.Choice(["desk", "finetune", "pretrain"]),
    default="desk",
    help="Training preset (default: desk)",
)
@click.option("--epochs", type=int, default=None, help="Override the preset's epochs")
@click.option("--lr", type=float, default=None, help="Override the base learning rate")
@click.option("--accumulation", type=int, default=None, help="Slides per update")
@click.option("--window", default=None, help="Scan window override, e.g. 16x16")
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("run"),
    help="Output directory (default: ./run)",
)
@click.pass_context
@_reports_errors
def train(
    ctx,
    config_ref: str,
    data: Path,
    task: Optional[str],
    preset: str,
    epochs: Optional[int],
    lr: Optional[float],
    accumulation: Optional[int],
    window: Optional[str],
    out: Path,
):
    """Train a network and head on a dataset.

    Writes loss_curve.csv and a checkpoint directory under --out.

    Examples:
        pixel-mamba train --config tiny-8 --data data/
        pixel-mamba --seed 1 train --config my.cfg --data data/ --task survive
    """
    from rich.progress import Progress

    from .config import DTYPES
    from .config import Task
    from .config import TrainConfig
    from .config import load_config
    from .harness.data import Dataset
    from .harness.train import head_outputs
    from .harness.train import init_checkpoint
    from .harness.train import train as run_training
    from .ui import train_panel

    settings = _settings(ctx)
    config = load_config(config_ref)
    if window:
        config = config.with_window(window)
    dataset = Dataset.load(data)
    if task:
        dataset.task = Task(task)
    tc = TrainConfig.from_preset(
        preset,
        epochs=epochs,
        lr=lr,
        accumulation=accumulation,
        seed=settings.seed,
        workers=settings.workers,
    )
    start = init_checkpoint(
        config,
        dataset.task,
        head_outputs(dataset.task, dataset.spec),
        settings.seed,
        DTYPES[settings.dtype],
    )

    with Progress(console=_get_console(), transient=True) as progress:
        bar = progress.add_task("Training", total=tc.epochs)

        def report(epoch: int, loss: float) -> None:
            progress.update(
                bar, advance=1, description=f"Epoch {epoch} loss {loss:.4f}"
            )

        result = run_training(start, dataset, tc, out_dir=out, progress=report)
    _get_console().print(train_panel(result))


@cli.command(name="eval")
@click.option(
    "--ckpt",
    type=click.Path(exists=True, path_type=Path),
    required=True,
    help="Checkpoint directory",
)
@click.option(
    "--data",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    required=True,
    help="Dataset directory",
)
@click.option("--folds", type=int, default=5, help="Number of folds (default: 5)")
@click.option(
    "--config",
    "config_ref",
    default=None,
    help="Config the checkpoint must match (default: the stored one)",
)
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=None,
    help="Directory for report.csv (and km.csv/km.svg for survival)",
)
@click.pass_context
@_reports_errors
def evaluate_command(
    ctx,
    ckpt: Path,
    data: Path,
    folds: int,
    config_ref: Optional[str],
    out: Optional[Path],
):
    """Score a checkpoint per fold (macro-F1 or C-index).

    Examples:
        pixel-mamba eval --ckpt run/checkpoint --data data/
        pixel-mamba eval --ckpt run/checkpoint --data data/ --out report/
    """
    from .config import load_config
    from .harness.data import Dataset
    from .harness.evaluate import evaluate
    from .harness.train import load_checkpoint
    from .ui import eval_table

    settings = _settings(ctx)
    config = load_config(config_ref) if config_ref else None
    checkpoint = load_checkpoint(ckpt, config)
    dataset = Dataset.load(data)
    report = evaluate(
        checkpoint,
        dataset,
        folds=folds,
        seed=settings.seed,
        out_dir=out,
        workers=settings.workers,
    )
    console = _get_console()
    console.print(eval_table(report))
    if report.logrank is not None:
        console.print(
            f"Log-rank (high vs low median risk): chi2 = {report.logrank.chi2:.4f}, "
            f"p = {report.logrank.p_value:.4g}"
        )
    for name, path in report.paths.items():
        console.print(f"[dim]{name}: {path}[/dim]")


@cli.command()
@click.option(
    "--image",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="Image file (.pxmt, .ppm, .pgm or .png)",
)
@click.option("--window", required=True, help="Scan window, e.g. 16 or 16x32")
@click.option("--show", type=int, default=12, help="Tokens to list (default: 12)")
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Write tokens to <out>.pxmt and CLS positions to <out>.csv",
)
@_reports_errors
def serialize(image: Path, window: str, show: int, out: Optional[Path]):
    """Serialize an image and list the first tokens in scan order.

    Examples:
        pixel-mamba serialize --image slide.ppm --window 16
        pixel-mamba serialize --image slide.pxmt --window 16x32 --out seq
    """
    import numpy as np
    from rich.table import Table

    from .core.tensor import Tensor
    from .harness.data import read_image
    from .serialization import ClsMarker
    from .serialization import ScanWindow
    from .serialization import coords_of
    from .serialization import serialize as serialize_image

    raster = read_image(image)
    height, width, channels = raster.shape
    seq = serialize_image(raster, ScanWindow.parse(window), Tensor(np.zeros(channels)))
    console = _get_console()
    console.print(
        f"Image {height}x{width}x{channels}, window {window}: "
        f"{seq.n_regions} regions, M = {seq.total_tokens:,} tokens "
        f"(H*W + n = {height * width + seq.n_regions:,})"
    )
    table = Table(title="Scan order")
    table.add_column("Index", justify="right")
    table.add_column("Token")
    for index in range(min(show, seq.total_tokens)):
        where = coords_of(seq, index)
        label = (
            f"CLS of region {where.region}"
            if isinstance(where, ClsMarker)
            else f"pixel ({where[0]}, {where[1]})"
        )
        table.add_row(str(index), label)
    console.print(table)

    if out is not None:
        import pandas as pd

        from .core.io import save_tensor
        from .serialization import flatten

        tokens, cls_positions = flatten(seq)
        tensor_path = save_tensor(out.with_suffix(".pxmt"), tokens)
        sidecar = out.with_suffix(".csv")
        pd.DataFrame(
            {
                "region": range(seq.n_regions),
                "cls_position": cls_positions,
                "origin_row": [r.origin[0] for r in seq.regions],
                "origin_col": [r.origin[1] for r in seq.regions],
            }
        ).to_csv(sidecar, index=False)
        console.print(f"[green]✓ Wrote {tensor_path} and {sidecar}[/green]")


@cli.command()
@click.option("--config", "config_ref", required=True, help="Bundled name or .cfg path")
@click.option("--dims", required=True, help="Image size HxW, e.g. 448x448")
@click.option("--window", default=None, help="Scan window override")
@click.option(
    "--run",
    "run_forward",
    is_flag=True,
    help="Also run a forward pass on a synthetic image and show the fusion trace",
)
@click.option(
    "--fusion-csv",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Write the fusion trace to CSV (implies --run)",
)
@click.pass_context
@_reports_errors
def inspect(
    ctx,
    config_ref: str,
    dims: str,
    window: Optional[str],
    run_forward: bool,
    fusion_csv: Optional[Path],
):
    """Print the per-layer shape trace and the memory law of a config.

    Examples:
        pixel-mamba inspect --config pixelmamba-6m --dims 448x448
        pixel-mamba inspect --config tiny-8 --dims 64x64 --run
    """
    from .config import load_config
    from .network import build
    from .network import forward
    from .network import shape_trace
    from .ui import print_trace

    config = load_config(config_ref)
    if window:
        config = config.with_window(window)
    size = _parse_dims(dims)
    trace = shape_trace(config, size)
    fusion = None
    if run_forward or fusion_csv:
        import pandas as pd

        from .config import DTYPES
        from .config import SynthSpec
        from .core.rng import Rng
        from .harness.data import synth_image

        settings = _settings(ctx)
        model = build(config, Rng(settings.seed), dtype=DTYPES[settings.dtype])
        spec = SynthSpec(
            height=size[0],
            width=size[1],
            window=str(config.scan_window),
            channels=config.init_channels,
            seed=settings.seed,
        )
        image = synth_image(spec, 0.3, Rng(settings.seed).child(1))
        embedding = forward(model, image)
        trace, fusion = embedding.shapes, embedding.fusion
        if fusion_csv:
            pd.DataFrame(
                [
                    {
                        "layer": r.layer,
                        "n_before": r.n_before,
                        "k": r.k,
                        "n_after": r.n_after,
                        "pairs": ";".join(f"{g}-{p}" for g, p in r.pairs),
                        "similarities": ";".join(f"{s:.6f}" for s in r.similarities),
                    }
                    for r in fusion
                ]
            ).to_csv(fusion_csv, index=False)
    print_trace(_get_console(), trace, fusion)


@cli.command()
@click.option(
    "--risks",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="CSV with columns slide_id, risk",
)
@click.option(
    "--records",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="CSV with columns slide_id, time_bin, censor",
)
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    required=True,
    help="Output .svg or .csv; the other format is written alongside",
)
@_reports_errors
def km(risks: Path, records: Path, out: Path):
    """Kaplan-Meier curves of the high- and low-risk halves with a log-rank test.

    Examples:
        pixel-mamba km --risks report/predictions.csv --records data/records.csv \\
            --out km.svg
    """
    from .metrics import compare_risk_groups

    result = compare_risk_groups(risks, records, out)
    _get_console().print(
        f"High risk: {result.n_high} slides, low risk: {result.n_low} slides\n"
        f"Log-rank chi2 = {result.logrank.chi2:.4f}, p = {result.logrank.p_value:.4g}"
    )
    _get_console().print(f"[dim]Wrote {result.csv_path} and {result.svg_path}[/dim]")


@cli.group()
def logs():
    """View and manage Pixel-Mamba logs.

    Logs are stored in /tmp/pixel-mamba/ (or $PIXELMAMBA_LOG_DIR) and rotate
    automatically when they reach 10MB.
    """
    pass


@logs.command(name="show")
@click.option(
    "--lines",
    "-n",
    default=50,
    type=int,
    help="Number of lines to show (default: 50)",
)
def show_logs(lines: int):
    """Show recent log entries."""
    from .logging import get_log_file_path
    from .logging import read_recent_logs

    _get_console().print(f"[dim]Last {lines} lines from {get_log_file_path()}:[/dim]\n")
    _get_console().print(read_recent_logs(lines), markup=False)


@logs.command(name="clear")
def clear_logs():
    """Clear all log files."""
    from .logging import clear_logs as clear_log_files

    success, message = clear_log_files()
    if success:
        _get_console().print(f"[green]✓ {message}[/green]")
    else:
        _get_console().print(f"[red]✗ {message}[/red]")


@logs.command(name="path")
def log_path():
    """Show the path to the log file."""
    from .logging import get_log_file_path

    _get_console().print(f"[cyan]Log file: {get_log_file_path()}[/cyan]")


@logs.command(name="stats")
def log_stats():
    """Show statistics about log files."""
    from .logging import get_log_stats

    stats = get_log_stats()
    if stats["total_files"] == 0:
        _get_console().print("[yellow]No log files found.[/yellow]")
        return

    from rich.panel import Panel

    _get_console().print(
        Panel.fit(
            f"""[cyan]Log Statistics:[/cyan]

Total files: {stats['total_files']}
Total size: {stats['total_size_mb']:.2f} MB

Current log: {stats['current_log']}
Oldest log: {stats['oldest_log']}""",
            title="Log Stats",
            border_style="cyan",
        )
    )


if __name__ == "__main__":
    cli()
