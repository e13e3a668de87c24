"""Region fusion: merge the most similar regions after each layer.

Regions are split by sequence order into a gallery (first half, plus the
odd one) and a probe set (second half). CLS cosine similarities between
the two sets pick k one-to-one pairs greedily, and each pair is replaced
by the members-weighted average of its grid and CLS tokens, kept in the
gallery region's slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from typing import Sequence

import numpy as np

from .core import ops
from .errors import ValidationError
from .logging import get_logger
from .serialization import Region
from .serialization import TokenSequence


logger = get_logger("fusion")

# Norms below this make a cosine similarity 0
NORM_EPS = 1e-12


class FusionError(ValidationError):
    """Raised for invalid merge counts or fusion parameters."""

    pass


@dataclass(frozen=True)
class SimilarityMatrix:
    """Cosine similarities, rows are gallery regions, columns probe regions."""

    values: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FusionRecord:
    """What fusion did at one layer.

    Attributes:
        layer: 1-based layer index
        n_before: Region count entering fusion
        k: Number of merged pairs
        pairs: (gallery index, probe index) per merge, in sequence indices
        similarities: Cosine similarity of each merged pair
    """

    layer: int
    n_before: int
    k: int
    pairs: tuple[tuple[int, int], ...] = ()
    similarities: tuple[float, ...] = ()

    @property
    def n_after(self) -> int:
        return self.n_before - self.k


@dataclass
class FusionSchedule:
    """Fusion parameters plus the per-layer trace of a forward pass."""

    alpha: float
    layers: int
    trace: list[FusionRecord] = field(default_factory=list)

    def __post_init__(self):
        _check_alpha(self.alpha)
        if self.layers < 1:
            raise FusionError(f"layer count must be >= 1, got {self.layers}")

    def merge_count(self, n: int) -> int:
        return merge_count(n, self.alpha, self.layers)

    def region_counts(self, n0: int, steps: int | None = None) -> list[int]:
        """Region count entering each layer when starting from n0."""
        counts = []
        n = n0
        for _ in range(self.layers if steps is None else steps):
            counts.append(n)
            n -= self.merge_count(n)
        return counts


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise FusionError(f"alpha must lie in (0, 1), got {alpha}")


def merge_count(n: int, alpha: float, layers: int) -> int:
    """k = ceil(alpha * n / layers), clamped to floor(n / 2); 0 when n < 2.

    Examples:
        >>> merge_count(60, 0.8, 24)
        2
        >>> merge_count(24, 0.8, 24)
        1
    """
    _check_alpha(alpha)
    if n < 0:
        raise FusionError(f"region count must be >= 0, got {n}")
    if layers < 1:
        raise FusionError(f"layer count must be >= 1, got {layers}")
    if n < 2:
        return 0
    # rounding absorbs float noise such as 0.8 * 60 / 24 = 2.0000000000000004
    k = math.ceil(round(alpha * n / layers, 9))
    return min(k, n // 2)


def split_gallery_probe(
    regions: Sequence[Region],
) -> tuple[list[Region], list[Region]]:
    """First ceil(n/2) regions form the gallery, the rest the probe set."""
    cut = (len(regions) + 1) // 2
    return list(regions[:cut]), list(regions[cut:])


def cls_similarity(
    gallery: Sequence[Region], probe: Sequence[Region]
) -> SimilarityMatrix:
    """Cosine similarity of every gallery CLS with every probe CLS.

    Zero-norm CLS vectors get similarity 0.
    """
    g = np.stack([region.cls.data for region in gallery]).astype(np.float64)
    p = np.stack([region.cls.data for region in probe]).astype(np.float64)
    g_norm = np.linalg.norm(g, axis=1)
    p_norm = np.linalg.norm(p, axis=1)
    denom = np.outer(g_norm, p_norm)
    dots = g @ p.T
    values = np.where(denom > NORM_EPS, dots / np.maximum(denom, NORM_EPS), 0.0)
    return SimilarityMatrix(np.clip(values, -1.0, 1.0))


def greedy_pairs(sim: SimilarityMatrix, k: int) -> list[tuple[int, int, float]]:
    """Pick k one-to-one (gallery, probe) pairs by repeated max-cell removal.

    Ties go to the smaller gallery index, then the smaller probe index.
    """
    rows, cols = sim.shape
    cells = sorted(
        ((float(sim.values[i, j]), i, j) for i in range(rows) for j in range(cols)),
        key=lambda cell: (-cell[0], cell[1], cell[2]),
    )
    used_rows: set[int] = set()
    used_cols: set[int] = set()
    pairs = []
    for value, i, j in cells:
        if len(pairs) == k:
            break
        if i in used_rows or j in used_cols:
            continue
        used_rows.add(i)
        used_cols.add(j)
        pairs.append((i, j, value))
    return pairs


def merge_regions(a: Region, b: Region, weighted: bool = True) -> Region:
    """Average two regions' grids and CLS tokens; a's origin and slot survive.

    With weighted averaging each side counts by its members, so a merged
    region stays the mean of all windows it absorbed.
    """
    if a.grid.shape != b.grid.shape:
        raise FusionError(f"cannot merge grids {a.grid.shape} and {b.grid.shape}")
    wa, wb = (a.members, b.members) if weighted else (1, 1)
    total = wa + wb

    def mix(x, y):
        return ops.add(ops.mul(x, wa / total), ops.mul(y, wb / total))

    return replace(
        a,
        grid=mix(a.grid, b.grid),
        cls=mix(a.cls, b.cls),
        members=a.members + b.members,
    )


def fuse_topk(
    regions: Sequence[Region],
    k: int,
    weighted: bool = True,
) -> tuple[list[Region], list[tuple[int, int]], list[float]]:
    """Merge the k most similar gallery/probe pairs.

    Args:
        regions: Regions in sequence order
        k: Number of pairs to merge
        weighted: Weight the average by members (plain mean otherwise)

    Returns:
        Tuple of (regions after fusion, merged (gallery, probe) sequence
        indices, their similarities)

    Raises:
        FusionError: If k exceeds floor(n / 2)
    """
    n = len(regions)
    if k < 0 or k > n // 2:
        raise FusionError(f"cannot merge {k} pairs out of {n} regions")
    if k == 0:
        return list(regions), [], []

    gallery, probe = split_gallery_probe(regions)
    offset = len(gallery)
    chosen = greedy_pairs(cls_similarity(gallery, probe), k)

    merged = list(regions)
    removed = set()
    pairs = []
    sims = []
    for i, j, value in chosen:
        merged[i] = merge_regions(regions[i], regions[offset + j], weighted)
        removed.add(offset + j)
        pairs.append((i, offset + j))
        sims.append(value)
    kept = [region for idx, region in enumerate(merged) if idx not in removed]
    return kept, pairs, sims


def fuse_sequence(
    seq: TokenSequence,
    schedule: FusionSchedule,
    layer: int,
    weighted: bool = True,
) -> TokenSequence:
    """Apply one layer's fusion to a sequence and append to the trace."""
    n = seq.n_regions
    k = schedule.merge_count(n)
    regions, pairs, sims = fuse_topk(seq.regions, k, weighted)
    schedule.trace.append(
        FusionRecord(
            layer=layer,
            n_before=n,
            k=k,
            pairs=tuple(pairs),
            similarities=tuple(sims),
        )
    )
    for (g, p), value in zip(pairs, sims):
        logger.debug(
            f"Layer {layer}: merged region {p} into {g} (similarity {value:.4f})"
        )
    return seq.with_regions(regions)
