"""Synthetic data, training, checkpoints and evaluation."""

from .data import Dataset
from .data import Slide
from .data import SynthError
from .data import synth_dataset
from .evaluate import EvalReport
from .evaluate import cross_validate
from .evaluate import evaluate
from .evaluate import fold_assignment
from .train import Checkpoint
from .train import CheckpointError
from .train import DivergenceError
from .train import TrainResult
from .train import init_checkpoint
from .train import load_checkpoint
from .train import save_checkpoint
from .train import train


__all__ = [
    "Checkpoint",
    "CheckpointError",
    "Dataset",
    "DivergenceError",
    "EvalReport",
    "Slide",
    "SynthError",
    "TrainResult",
    "cross_validate",
    "evaluate",
    "fold_assignment",
    "init_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "synth_dataset",
    "train",
]
