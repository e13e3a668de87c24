"""Training loop and checkpoints.

Every epoch visits the slides in a seeded order. Gradients of consecutive
slides are averaged over an accumulation window before one AdamW update;
windows run across epoch boundaries, so a run of S slide steps makes
ceil(S / accumulation) updates. The learning rate follows a cosine decay
over those updates.

A checkpoint is a directory:

    checkpoint.yaml         format version, task, dtype, config text, names
    params/<name>.pxmt      one tensor file per parameter
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Callable
from typing import Optional
from typing import Union

import numpy as np
import pandas as pd
import yaml

from ..config import ConfigError
from ..config import NetworkConfig
from ..config import SynthSpec
from ..config import Task
from ..config import TrainConfig
from ..config import dump_cfg
from ..config import parse_cfg
from ..core.io import load_tensor
from ..core.io import save_tensor
from ..core.rng import Rng
from ..core.tensor import Tape
from ..core.tensor import Tensor
from ..core.tensor import backward
from ..errors import NumericError
from ..errors import ValidationError
from ..heads import HeadParams
from ..heads import classify_head
from ..heads import cross_entropy
from ..heads import survival_nll
from ..logging import get_logger
from ..network import Model
from ..network import build
from ..network import forward
from .data import Dataset
from .data import Slide
from .data import SynthError
from .optim import AdamW
from .optim import cosine_lr
from .parallel import SlidePool
from .parallel import reduce_gradients


logger = get_logger("train")

CHECKPOINT_VERSION = 1
MANIFEST_NAME = "checkpoint.yaml"


class DivergenceError(NumericError):
    """Raised when the training loss or the parameters stop being finite."""

    pass


class CheckpointError(ValidationError):
    """Raised for unreadable checkpoints or a checkpoint/config mismatch."""

    pass


@dataclass
class Checkpoint:
    """Trained network plus head.

    Attributes:
        model: Network parameters and config
        head: Task head parameters
        task: Task the head was trained for
        meta: Training summary stored alongside the tensors
    """

    model: Model
    head: HeadParams
    task: Task
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> NetworkConfig:
        return self.model.config

    def parameters(self) -> dict[str, Tensor]:
        return {**self.model.params, **dict(self.head.named())}


@dataclass
class TrainResult:
    """Outcome of a training run."""

    checkpoint: Checkpoint
    curve: pd.DataFrame
    steps: int
    updates: int
    curve_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None

    @property
    def final_loss(self) -> float:
        return float(self.curve["loss"].iloc[-1])

    def smoothed_losses(self, window: int = 10) -> np.ndarray:
        """Trailing moving average of the per-epoch loss."""
        return self.curve["loss"].rolling(window).mean().dropna().to_numpy()


def head_outputs(task: Task, spec: SynthSpec) -> int:
    """Classes for classification, time bins for survival."""
    return spec.n_classes if task == Task.CLASSIFY else spec.t_bins


def init_checkpoint(
    config: NetworkConfig,
    task: Task,
    outputs: int,
    seed: int = 0,
    dtype=np.float64,
) -> Checkpoint:
    """Freshly initialized network and head for a seed."""
    root = Rng(seed)
    model = build(config, root.child(0), dtype=dtype)
    head = HeadParams.init(config.final_channels, outputs, root.child(1), dtype=dtype)
    return Checkpoint(model=model, head=head, task=task)


def slide_logits(model: Model, head: HeadParams, image: np.ndarray) -> Tensor:
    embedding = forward(model, image).vector
    return classify_head(embedding, head.weight, head.bias)


def slide_loss(
    model: Model,
    head: HeadParams,
    slide: Slide,
    task: Task,
    smoothing: float = 0.0,
    flip: bool = False,
) -> Tensor:
    """Loss of one slide under the task's objective."""
    image = slide.image[:, ::-1] if flip else slide.image
    logits = slide_logits(model, head, image)
    if task == Task.CLASSIFY:
        return cross_entropy(logits, slide.label, smoothing)
    return survival_nll(logits, slide.record)


def slide_gradients(
    model: Model,
    head: HeadParams,
    slide: Slide,
    task: Task,
    smoothing: float = 0.0,
    flip: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and gradient of every named parameter for one slide."""
    with Tape() as tape:
        loss = slide_loss(model, head, slide, task, smoothing, flip)
    grads = backward(tape, loss)
    named = {**model.params, **dict(head.named())}
    return loss.item(), {name: g.data for name, g in grads.items_for(named)}


def _dump_divergence(
    out_dir: Optional[Path],
    params: dict[str, Tensor],
    context: dict,
) -> Optional[Path]:
    norms = {
        name: float(np.linalg.norm(tensor.data)) for name, tensor in params.items()
    }
    logger.error(f"Training diverged: {context}")
    if out_dir is None:
        return None
    path = Path(out_dir) / "divergence.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(
            {**context, "param_norms": norms},
            f,
            default_flow_style=False,
            sort_keys=False,
        )
    return path


def train(
    checkpoint: Checkpoint,
    dataset: Dataset,
    tc: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Fit the network and head of a checkpoint to a dataset.

    Args:
        checkpoint: Initial parameters (left untouched)
        dataset: Training slides; the dataset's task selects the loss
        tc: Optimizer, schedule and run settings
        out_dir: Where loss_curve.csv, the checkpoint and any divergence
            dump are written (nothing is written when None)
        progress: Called with (epoch, mean loss) after every epoch

    Returns:
        TrainResult

    Raises:
        SynthError: If the dataset is empty
        DivergenceError: If a loss or parameter becomes NaN or Inf
    """
    if len(dataset) == 0:
        raise SynthError("cannot train on an empty dataset")
    task = dataset.task
    out_dir = Path(out_dir) if out_dir is not None else None
    params = checkpoint.parameters()
    model, head = checkpoint.model, checkpoint.head

    optimizer = AdamW(
        betas=(tc.beta1, tc.beta2), eps=tc.adam_eps, weight_decay=tc.weight_decay
    )
    n = len(dataset)
    acc = tc.accumulation
    total_steps = tc.epochs * n
    total_updates = math.ceil(total_steps / acc)
    rng = Rng(tc.seed)
    logger.info(
        f"Training {checkpoint.config.name} on {n} slides ({task.value}): "
        f"{tc.epochs} epochs, {total_updates} updates, lr {tc.lr}"
    )

    rows = []
    step = update = 0
    lr = tc.lr
    pending: list[dict[str, np.ndarray]] = []
    with SlidePool(tc.workers) as pool:
        for epoch in range(1, tc.epochs + 1):
            stream = rng.child(epoch)
            order = stream.child(0).permutation(n)
            flips = (
                stream.child(1).bernoulli(0.5, n) if tc.hflip else np.zeros(n, int)
            )
            losses: list[float] = []
            i = 0
            while i < n:
                chunk = [int(idx) for idx in order[i : i + acc - len(pending)]]

                def run(idx: int, model=model, head=head):
                    return slide_gradients(
                        model,
                        head,
                        dataset.slides[idx],
                        task,
                        tc.label_smoothing,
                        bool(flips[idx]),
                    )

                context = {"epoch": epoch, "step": step, "update": update, "lr": lr}
                try:
                    results = pool.map(run, chunk)
                except NumericError as e:
                    dump = _dump_divergence(out_dir, params, context)
                    raise DivergenceError(f"{e} (diagnostics: {dump})") from e
                for loss, grads in results:
                    if not math.isfinite(loss):
                        dump = _dump_divergence(out_dir, params, context)
                        raise DivergenceError(
                            f"loss became {loss} (diagnostics: {dump})"
                        )
                    losses.append(loss)
                    pending.append(grads)
                i += len(chunk)
                step += len(chunk)

                if len(pending) == acc or step == total_steps:
                    lr = cosine_lr(update, total_updates, tc.lr) if tc.cosine else tc.lr
                    try:
                        params = optimizer.step(params, reduce_gradients(pending), lr)
                    except NumericError as e:
                        dump = _dump_divergence(out_dir, params, context)
                        raise DivergenceError(f"{e} (diagnostics: {dump})") from e
                    model = model.with_params(params)
                    head = HeadParams(params["head.weight"], params["head.bias"])
                    update += 1
                    pending = []

            mean_loss = float(np.mean(losses))
            rows.append(
                {"epoch": epoch, "loss": mean_loss, "lr": lr, "updates": update}
            )
            logger.info(f"Epoch {epoch}/{tc.epochs}: loss {mean_loss:.6f}, lr {lr:.3e}")
            if progress is not None:
                progress(epoch, mean_loss)

    curve = pd.DataFrame(rows, columns=["epoch", "loss", "lr", "updates"])
    trained = Checkpoint(
        model=model,
        head=head,
        task=task,
        meta={
            "epochs": tc.epochs,
            "lr": tc.lr,
            "accumulation": acc,
            "seed": tc.seed,
            "steps": step,
            "updates": update,
            "final_loss": float(curve["loss"].iloc[-1]),
        },
    )
    result = TrainResult(checkpoint=trained, curve=curve, steps=step, updates=update)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.curve_path = out_dir / "loss_curve.csv"
        curve.to_csv(result.curve_path, index=False)
    target = tc.checkpoint or (out_dir / "checkpoint" if out_dir else None)
    if target is not None:
        result.checkpoint_path = save_checkpoint(trained, target)
    return result


def save_checkpoint(checkpoint: Checkpoint, directory: Union[str, Path]) -> Path:
    """Write a checkpoint directory; returns its path."""
    directory = Path(directory)
    params = checkpoint.parameters()
    for name, tensor in params.items():
        save_tensor(directory / "params" / f"{name}.pxmt", tensor)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "task": checkpoint.task.value,
        "head_outputs": checkpoint.head.outputs,
        "dtype": np.dtype(checkpoint.model.dtype).name,
        "parameters": list(params),
        "train": checkpoint.meta,
        "config": dump_cfg(checkpoint.config),
    }
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
        yaml.dump(manifest, f, default_flow_style=False, sort_keys=False)
    logger.info(f"Saved checkpoint ({len(params)} tensors) to {directory}")
    return directory


def load_checkpoint(
    directory: Union[str, Path], config: Optional[NetworkConfig] = None
) -> Checkpoint:
    """Read a checkpoint directory.

    Args:
        directory: Directory written by save_checkpoint (or its checkpoint.yaml)
        config: When given, must match the config stored in the checkpoint

    Raises:
        CheckpointError: If files are missing, the version is unknown, or the
            tensors do not fit the stored (or given) config
    """
    directory = Path(directory)
    if directory.name == MANIFEST_NAME:
        directory = directory.parent
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} in {directory}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise CheckpointError(f"YAML parsing error in {manifest_path}: {e}") from None

    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        stored = parse_cfg(manifest["config"])
        task = Task(manifest["task"])
    except (KeyError, ValueError, ConfigError) as e:
        raise CheckpointError(f"invalid checkpoint manifest: {e}") from None
    if config is not None and dump_cfg(config) != dump_cfg(stored):
        raise CheckpointError(
            f"checkpoint/config mismatch: checkpoint holds {stored.name}, "
            f"config is {config.name}"
        )

    dtype = np.dtype(manifest.get("dtype", "float64")).type
    reference = init_checkpoint(
        stored, task, int(manifest.get("head_outputs", 1)), dtype=dtype
    )
    expected = reference.parameters()
    names = manifest.get("parameters", [])
    if set(names) != set(expected):
        raise CheckpointError(
            "checkpoint/config mismatch: parameter names differ "
            f"({sorted(set(names) ^ set(expected))[:5]})"
        )
    params = {}
    for name in names:
        tensor = load_tensor(directory / "params" / f"{name}.pxmt")
        if tensor.shape != expected[name].shape:
            raise CheckpointError(
                f"checkpoint/config mismatch: {name} has shape {tensor.shape}, "
                f"config expects {expected[name].shape}"
            )
        params[name] = Tensor(tensor, requires_grad=True, dtype=dtype)

    return Checkpoint(
        model=reference.model.with_params(params),
        head=HeadParams(params["head.weight"], params["head.bias"]),
        task=task,
        meta=manifest.get("train") or {},
    )
