"""Token expansion: grow the receptive field of every region.

One expansion step shift-merges the grid along an axis (average each
token with its predecessor on that axis) and then pairs rows (2i, 2i+1),
or columns, either by concatenating them along channels or by averaging
them.
"""

from __future__ import annotations

from dataclasses import dataclass
from dataclasses import replace
from enum import Enum

from .core import ops
from .core.tensor import Tensor
from .errors import ValidationError
from .serialization import Region
from .serialization import TokenSequence


class ExpansionError(ValidationError):
    """Raised when a grid cannot be expanded along the requested axis."""

    pass


class Axis(str, Enum):
    """Spatial axis an expansion halves."""

    VERTICAL = "v"
    HORIZONTAL = "h"


class Mode(str, Enum):
    """How paired tokens are combined."""

    CAT = "cat"
    AVG = "avg"


@dataclass(frozen=True)
class ExpansionSpec:
    """Axis and mode of one expansion step."""

    axis: Axis
    mode: Mode

    @classmethod
    def parse(cls, text: str) -> "ExpansionSpec":
        """Parse 'h:cat', 'v:avg' and the long forms 'horizontal:cat' etc."""
        try:
            axis_text, mode_text = text.strip().lower().split(":")
            axis_text = {"horizontal": "h", "vertical": "v"}.get(axis_text, axis_text)
            return cls(Axis(axis_text), Mode(mode_text))
        except ValueError:
            raise ExpansionError(f"invalid expansion '{text}'") from None

    def __str__(self) -> str:
        return f"{self.axis.value}:{self.mode.value}"

    def channels_after(self, channels: int) -> int:
        return 2 * channels if self.mode is Mode.CAT else channels

    def grid_after(self, grid: tuple[int, int]) -> tuple[int, int]:
        h, w = grid
        return (h // 2, w) if self.axis is Axis.VERTICAL else (h, w // 2)

    def rf_after(self, rf: tuple[int, int]) -> tuple[int, int]:
        rh, rw = rf
        return (2 * rh, rw) if self.axis is Axis.VERTICAL else (rh, 2 * rw)


def shift_merge(grid: Tensor, axis: Axis, zero_pad: bool = False) -> Tensor:
    """Average every token with its predecessor along an axis.

    Vertical: out[i] = (F[i] + F[i-1]) / 2 with row -1 padded by row 0
    (edge replication) or by zeros when zero_pad is set. Horizontal is the
    same along columns.

    Args:
        grid: Tokens [h, w, C]
        axis: Axis to shift along
        zero_pad: Pad with zeros instead of replicating the edge
    """
    dim = 0 if axis is Axis.VERTICAL else 1
    extent = grid.shape[dim]
    if extent == 1 and not zero_pad:
        return grid
    edge = grid[0:1] if dim == 0 else grid[:, 0:1]
    if zero_pad:
        edge = ops.mul(edge, 0.0)
    if extent == 1:
        shifted = edge
    else:
        body = grid[0 : extent - 1] if dim == 0 else grid[:, 0 : extent - 1]
        shifted = ops.concat([edge, body], axis=dim)
    return ops.mul(ops.add(grid, shifted), 0.5)


def _pair_tokens(grid: Tensor, spec: ExpansionSpec) -> Tensor:
    h, w, c = grid.shape
    if spec.axis is Axis.VERTICAL:
        paired = ops.reshape(grid, (h // 2, 2, w, c))
        if spec.mode is Mode.AVG:
            return ops.mean(paired, axis=1)
        # [h/2, w, 2, C]: row 2i channels first, then row 2i+1
        paired = ops.transpose(paired, (0, 2, 1, 3))
        return ops.reshape(paired, (h // 2, w, 2 * c))
    paired = ops.reshape(grid, (h, w // 2, 2, c))
    if spec.mode is Mode.AVG:
        return ops.mean(paired, axis=2)
    return ops.reshape(paired, (h, w // 2, 2 * c))


def expand(region: Region, spec: ExpansionSpec, zero_pad: bool = False) -> Region:
    """Apply one expansion step to a region.

    Args:
        region: Region to expand
        spec: Axis and mode
        zero_pad: Zero padding in the shift merge

    Returns:
        Region with the axis halved, channels doubled under cat, and the
        receptive field doubled along the axis

    Raises:
        ExpansionError: If the grid extent along the axis is odd
    """
    dim = 0 if spec.axis is Axis.VERTICAL else 1
    extent = region.grid_shape[dim]
    if extent % 2:
        raise ExpansionError(
            f"cannot expand {spec}: grid {region.grid_shape} has odd extent {extent}"
        )
    grid = _pair_tokens(shift_merge(region.grid, spec.axis, zero_pad), spec)
    cls = region.cls
    if spec.mode is Mode.CAT:
        cls = ops.concat([cls, cls], axis=0)
    return replace(region, grid=grid, cls=cls, rf=spec.rf_after(region.rf))


def expand_vertical(region: Region, mode: Mode, zero_pad: bool = False) -> Region:
    return expand(region, ExpansionSpec(Axis.VERTICAL, mode), zero_pad)


def expand_horizontal(region: Region, mode: Mode, zero_pad: bool = False) -> Region:
    return expand(region, ExpansionSpec(Axis.HORIZONTAL, mode), zero_pad)


def expand_sequence(
    seq: TokenSequence, spec: ExpansionSpec, zero_pad: bool = False
) -> TokenSequence:
    """Expand every region of a sequence with the same spec."""
    regions = [expand(region, spec, zero_pad) for region in seq.regions]
    return seq.with_regions(
        regions, channels=spec.channels_after(seq.channels), rf=spec.rf_after(seq.rf)
    )
