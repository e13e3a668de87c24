"""Whole-image serialization into region-structured token sequences.

An image is cut into scan windows. Windows are visited in serpentine
order over the window grid, and pixels inside a window are visited in
serpentine order too, so sequence neighbours are spatial neighbours. Each
window becomes a Region: a grid of spatial tokens plus one CLS token that
sits at the centre of the region's local sequence when flattened.
"""

from __future__ import annotations

from dataclasses import dataclass
from dataclasses import replace
from functools import lru_cache
from typing import Union

import numpy as np

from .core import ops
from .core.tensor import Tensor
from .errors import ValidationError


class SerializationError(ValidationError):
    """Raised when an image cannot be tiled or a sequence is malformed."""

    pass


@dataclass(frozen=True)
class ScanWindow:
    """Rows and columns (in pixels) of one scanning window."""

    h: int
    w: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise SerializationError(f"scan window must be positive, got {self}")

    @classmethod
    def parse(cls, text: str) -> "ScanWindow":
        """Parse '224', '224x224' or '16x32'."""
        parts = text.lower().replace("×", "x").split("x")
        try:
            if len(parts) == 1:
                return cls(int(parts[0]), int(parts[0]))
            if len(parts) == 2:
                return cls(int(parts[0]), int(parts[1]))
        except ValueError:
            pass
        raise SerializationError(f"cannot parse scan window '{text}'")

    def __str__(self) -> str:
        return f"{self.h}x{self.w}"


@dataclass(frozen=True)
class ClsMarker:
    """Returned by coords_of for the CLS token of a region."""

    region: int


@dataclass(frozen=True)
class Region:
    """One scan window's tokens.

    Attributes:
        grid: Spatial tokens [grid_h, grid_w, C]
        cls: Summary token [C]
        origin: (row, col) pixel offset of the (gallery) source window
        members: Number of source windows averaged into this region
        rf: Receptive field (rows, cols) of each spatial token, in pixels
    """

    grid: Tensor
    cls: Tensor
    origin: tuple[int, int]
    members: int = 1
    rf: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.members < 1:
            raise SerializationError(f"members must be >= 1, got {self.members}")
        if self.grid.ndim != 3 or self.cls.shape != (self.grid.shape[2],):
            raise SerializationError(
                f"region grid {self.grid.shape} and cls {self.cls.shape} disagree"
            )

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]

    @property
    def channels(self) -> int:
        return self.grid.shape[2]

    @property
    def spatial_count(self) -> int:
        return self.grid.shape[0] * self.grid.shape[1]

    @property
    def token_count(self) -> int:
        return self.spatial_count + 1

    @property
    def cls_index(self) -> int:
        """Local index of the CLS token inside the region's sequence."""
        return self.spatial_count // 2


@dataclass(frozen=True)
class TokenSequence:
    """Ordered regions plus the bookkeeping shared by all of them."""

    regions: tuple[Region, ...]
    channels: int
    rf: tuple[int, int]

    def __post_init__(self):
        if not self.regions:
            raise SerializationError("a token sequence needs at least one region")
        for region in self.regions:
            if region.channels != self.channels:
                raise SerializationError(
                    f"region has {region.channels} channels, sequence {self.channels}"
                )

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def total_tokens(self) -> int:
        return sum(region.token_count for region in self.regions)

    def with_regions(self, regions, channels=None, rf=None) -> "TokenSequence":
        return TokenSequence(
            regions=tuple(regions),
            channels=self.channels if channels is None else channels,
            rf=self.rf if rf is None else rf,
        )


def zigzag_order(h: int, w: int) -> list[tuple[int, int]]:
    """Serpentine scan: even rows left to right, odd rows right to left.

    Examples:
        >>> zigzag_order(2, 2)
        [(0, 0), (0, 1), (1, 1), (1, 0)]
    """
    if h < 1 or w < 1:
        raise SerializationError(f"zigzag_order needs positive extents, got {h}x{w}")
    order = []
    for row in range(h):
        cols = range(w) if row % 2 == 0 else range(w - 1, -1, -1)
        order.extend((row, col) for col in cols)
    return order


@lru_cache(maxsize=256)
def _flat_zigzag(h: int, w: int) -> tuple[int, ...]:
    return tuple(row * w + col for row, col in zigzag_order(h, w))


def serialize(
    image: Union[Tensor, np.ndarray],
    window: ScanWindow,
    cls_init: Tensor,
) -> TokenSequence:
    """Cut an image [H, W, C] into regions, windows in serpentine order.

    Args:
        image: Raster with channels last
        window: Scan window size in pixels
        cls_init: Shared CLS vector [C] given to every region

    Returns:
        TokenSequence with (H/h)*(W/w) regions and H*W + n tokens

    Raises:
        SerializationError: If the image does not tile exactly
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.ndim != 3:
        raise SerializationError(f"image must be [H, W, C], got {image.shape}")
    height, width, channels = image.shape
    if height % window.h or width % window.w:
        raise SerializationError(
            f"image {height}x{width} is not divisible by window {window}"
        )
    if cls_init.shape != (channels,):
        raise SerializationError(
            f"cls_init shape {cls_init.shape} does not match {channels} channels"
        )

    regions = []
    for win_row, win_col in zigzag_order(height // window.h, width // window.w):
        top, left = win_row * window.h, win_col * window.w
        grid = image[top : top + window.h, left : left + window.w]
        regions.append(Region(grid=grid, cls=cls_init, origin=(top, left)))
    return TokenSequence(regions=tuple(regions), channels=channels, rf=(1, 1))


def _layout(seq: TokenSequence) -> tuple[np.ndarray, list[int]]:
    """Permutation from stacked order (grid rows then CLS, per region) to
    sequence order, and the CLS positions in sequence order."""
    perm = []
    cls_positions = []
    offset = 0
    for region in seq.regions:
        count = region.spatial_count
        local = [offset + k for k in _flat_zigzag(*region.grid_shape)]
        mid = region.cls_index
        cls_positions.append(offset + mid)
        perm.extend(local[:mid])
        perm.append(offset + count)
        perm.extend(local[mid:])
        offset += count + 1
    return np.asarray(perm, dtype=np.int64), cls_positions


def flatten(seq: TokenSequence) -> tuple[Tensor, list[int]]:
    """Concatenate every region's local sequence into one [M, C] tensor.

    Returns:
        Tuple of (tokens [M, C], CLS position of each region)
    """
    pieces = []
    for region in seq.regions:
        pieces.append(ops.reshape(region.grid, (region.spatial_count, seq.channels)))
        pieces.append(ops.reshape(region.cls, (1, seq.channels)))
    stacked = ops.concat(pieces, axis=0)
    perm, cls_positions = _layout(seq)
    return ops.take(stacked, perm, axis=0), cls_positions


def unflatten(seq: TokenSequence, tokens: Tensor) -> TokenSequence:
    """Inverse of flatten: split a [M, C] tensor back into seq's regions.

    Args:
        seq: Sequence providing the region structure
        tokens: Flattened tokens with the same length and channels

    Raises:
        SerializationError: If tokens does not fit seq's structure
    """
    if tokens.shape != (seq.total_tokens, seq.channels):
        raise SerializationError(
            f"tokens {tokens.shape} do not fit sequence "
            f"({seq.total_tokens}, {seq.channels})"
        )
    perm, _ = _layout(seq)
    stacked = ops.take(tokens, np.argsort(perm), axis=0)
    regions = []
    offset = 0
    for region in seq.regions:
        count = region.spatial_count
        grid_h, grid_w = region.grid_shape
        grid = ops.reshape(
            stacked[offset : offset + count], (grid_h, grid_w, seq.channels)
        )
        cls = stacked[offset + count]
        regions.append(replace(region, grid=grid, cls=cls))
        offset += count + 1
    return seq.with_regions(regions)


def coords_of(
    seq: TokenSequence, flat_index: int
) -> Union[tuple[int, int], ClsMarker]:
    """Map a flattened index back to a pixel (row, col) or a CLS marker.

    Spatial tokens map to the top-left pixel of their receptive field in
    the region's origin window.

    Raises:
        SerializationError: If flat_index is out of range
    """
    if not 0 <= flat_index < seq.total_tokens:
        raise SerializationError(
            f"flat index {flat_index} outside [0, {seq.total_tokens})"
        )
    start = 0
    for region_id, region in enumerate(seq.regions):
        if flat_index < start + region.token_count:
            local = flat_index - start
            mid = region.cls_index
            if local == mid:
                return ClsMarker(region=region_id)
            k = local if local < mid else local - 1
            row, col = divmod(_flat_zigzag(*region.grid_shape)[k], region.grid_shape[1])
            return (
                region.origin[0] + row * region.rf[0],
                region.origin[1] + col * region.rf[1],
            )
        start += region.token_count
    raise SerializationError(f"flat index {flat_index} not found")  # unreachable
