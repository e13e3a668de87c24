"""Synthetic slide datasets and image input.

A synthetic slide is a noisy raster on which a small motif is planted on a
regular lattice of cells. The fraction of cells holding the motif is what
the label (or the survival risk) depends on, so a model has to recognize
the local shape and aggregate its density over the whole image.

On disk a dataset is a directory:

    manifest.yaml     synth spec and task
    records.csv       slide_id, label, time_bin, censor, density
    images/<id>.pxmt  one image tensor per slide
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from typing import Union

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError as PydanticValidationError

from ..config import SynthSpec
from ..config import Task
from ..core.io import load_tensor
from ..core.io import save_tensor
from ..core.rng import Rng
from ..errors import ValidationError
from ..heads import SurvivalRecord
from ..logging import get_logger


logger = get_logger("data")

BACKGROUND = 0.2
FOREGROUND = 1.0
RECORD_COLUMNS = ["slide_id", "label", "time_bin", "censor", "density"]


class SynthError(ValidationError):
    """Raised for invalid dataset requests or malformed dataset directories."""

    pass


@dataclass
class Slide:
    """One image with both of its targets.

    Attributes:
        slide_id: Stable identifier ("slide-0007")
        image: Raster [H, W, C] with values in [0, 1]
        label: Class index
        record: Survival outcome
        density: Motif density the slide was drawn with
    """

    slide_id: str
    image: np.ndarray
    label: int
    record: SurvivalRecord
    density: float = 0.0


@dataclass
class Dataset:
    """Ordered collection of slides drawn from one spec."""

    slides: list[Slide]
    spec: SynthSpec
    task: Task = Task.CLASSIFY

    def __len__(self) -> int:
        return len(self.slides)

    @property
    def labels(self) -> list[int]:
        return [slide.label for slide in self.slides]

    @property
    def records(self) -> list[SurvivalRecord]:
        return [slide.record for slide in self.slides]

    @property
    def dims(self) -> tuple[int, int]:
        return self.spec.height, self.spec.width

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            slides=[self.slides[i] for i in indices], spec=self.spec, task=self.task
        )

    def records_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "slide_id": s.slide_id,
                    "label": s.label,
                    "time_bin": s.record.t,
                    "censor": s.record.c,
                    "density": s.density,
                }
                for s in self.slides
            ],
            columns=RECORD_COLUMNS,
        )

    def save(self, directory: Union[str, Path]) -> Path:
        """Write the dataset directory (images, records.csv, manifest.yaml)."""
        directory = Path(directory)
        (directory / "images").mkdir(parents=True, exist_ok=True)
        for slide in self.slides:
            save_tensor(directory / "images" / f"{slide.slide_id}.pxmt", slide.image)
        self.records_frame().to_csv(directory / "records.csv", index=False)
        manifest = {
            "task": self.task.value,
            "n_slides": len(self.slides),
            "spec": self.spec.model_dump(),
        }
        with open(directory / "manifest.yaml", "w", encoding="utf-8") as f:
            yaml.dump(manifest, f, default_flow_style=False, sort_keys=False)
        logger.info(f"Saved {len(self.slides)} slides to {directory}")
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "Dataset":
        """Read a dataset directory written by save.

        Raises:
            SynthError: If the directory or any of its files is missing or invalid
        """
        directory = Path(directory)
        manifest_path = directory / "manifest.yaml"
        records_path = directory / "records.csv"
        if not manifest_path.exists() or not records_path.exists():
            raise SynthError(f"not a dataset directory: {directory}")
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                manifest = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise SynthError(f"YAML parsing error in {manifest_path}: {e}") from None
        try:
            spec = SynthSpec(**manifest.get("spec", {}))
            task = Task(manifest.get("task", Task.CLASSIFY.value))
        except (PydanticValidationError, ValueError) as e:
            raise SynthError(f"invalid manifest {manifest_path}: {e}") from None

        frame = pd.read_csv(records_path, dtype={"slide_id": str})
        missing = set(RECORD_COLUMNS) - set(frame.columns)
        if missing:
            raise SynthError(f"records.csv lacks columns {sorted(missing)}")
        slides = []
        for row in frame.itertuples(index=False):
            image = load_tensor(directory / "images" / f"{row.slide_id}.pxmt")
            slides.append(
                Slide(
                    slide_id=row.slide_id,
                    image=image.numpy(),
                    label=int(row.label),
                    record=SurvivalRecord(t=int(row.time_bin), c=int(row.censor)),
                    density=float(row.density),
                )
            )
        if not slides:
            raise SynthError(f"dataset {directory} holds no slides")
        return cls(slides=slides, spec=spec, task=task)


def _plant(canvas: np.ndarray, shape: np.ndarray, top: int, left: int) -> None:
    rows, cols = shape.shape
    patch = canvas[top : top + rows, left : left + cols]
    patch[shape.astype(bool)] = FOREGROUND


def synth_image(spec: SynthSpec, density: float, rng: Rng) -> np.ndarray:
    """Draw one raster with the motif planted in a `density` fraction of cells.

    Each lattice cell is one pixel larger than the motif in both directions
    so planted shapes never touch.
    """
    motif = np.asarray(spec.motif, dtype=np.int64)
    decoy = np.asarray(spec.decoy, dtype=np.int64)
    cell_h = max(motif.shape[0], decoy.shape[0]) + 1
    cell_w = max(motif.shape[1], decoy.shape[1]) + 1
    rows, cols = spec.height // cell_h, spec.width // cell_w

    image = BACKGROUND + rng.child(0).normal(
        (spec.height, spec.width, spec.channels), spec.noise
    )
    draws = rng.child(1).uniform((rows, cols))
    decoy_draws = rng.child(2).uniform((rows, cols))
    for r in range(rows):
        for c in range(cols):
            if draws[r, c] < density:
                _plant(image, motif, r * cell_h, c * cell_w)
            elif decoy_draws[r, c] < spec.decoy_density:
                _plant(image, decoy, r * cell_h, c * cell_w)
    return np.clip(image, 0.0, 1.0)


def survival_time(label: int, n_classes: int, t_bins: int) -> int:
    """Time bin falling with the class's motif density (1-based)."""
    severity = label / (n_classes - 1) if n_classes > 1 else 0.0
    return 1 + int(round((1.0 - severity) * (t_bins - 1)))


def synth_dataset(
    spec: SynthSpec, n_slides: int, task: Task = Task.CLASSIFY
) -> Dataset:
    """Draw a balanced dataset; labels cycle round-robin over the classes.

    Args:
        spec: Image recipe (seeded)
        n_slides: Number of slides to draw
        task: Task the dataset is meant for (recorded in the manifest)

    Returns:
        Dataset, identical for identical (spec, n_slides)

    Raises:
        SynthError: If n_slides < 1 or the motif does not fit the image
    """
    if n_slides < 1:
        raise SynthError(f"n_slides must be >= 1, got {n_slides}")
    motif = np.asarray(spec.motif)
    if motif.ndim != 2 or motif.shape[0] >= spec.height or motif.shape[1] >= spec.width:
        raise SynthError(f"motif {motif.shape} does not fit {spec.height}x{spec.width}")

    densities = spec.class_densities()
    root = Rng(spec.seed)
    slides = []
    for i in range(n_slides):
        label = i % spec.n_classes
        stream = root.child(i)
        censor = int(stream.child(3).bernoulli(spec.censor_rate, 1)[0])
        slides.append(
            Slide(
                slide_id=f"slide-{i:04d}",
                image=synth_image(spec, densities[label], stream),
                label=label,
                record=SurvivalRecord(
                    t=survival_time(label, spec.n_classes, spec.t_bins), c=censor
                ),
                density=densities[label],
            )
        )
    logger.info(
        f"Drew {n_slides} {task.value} slides of {spec.height}x{spec.width} "
        f"(seed {spec.seed})"
    )
    return Dataset(slides=slides, spec=spec, task=task)


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Read a raster [H, W, C] in [0, 1] from a tensor file or a PPM/PGM/PNG.

    Raises:
        SynthError: If the file is missing or cannot be decoded
    """
    path = Path(path)
    if not path.exists():
        raise SynthError(f"image not found: {path}")
    if path.suffix == ".pxmt":
        image = load_tensor(path).numpy()
        if image.ndim == 2:
            image = image[:, :, None]
        return image

    from PIL import Image
    from PIL import UnidentifiedImageError

    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB" if img.mode != "L" else "L"))
    except (UnidentifiedImageError, OSError) as e:
        raise SynthError(f"cannot decode image {path}: {e}") from None
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels.astype(np.float64) / 255.0
