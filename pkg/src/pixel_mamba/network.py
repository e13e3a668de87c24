"""Config-driven Pixel-Mamba stack.

Each layer runs Mamba block -> region fusion -> token expansion, in that
order, over the whole-image token sequence. The slide embedding is the
plain mean of the CLS tokens of the regions left after the last layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from dataclasses import field
from typing import Optional
from typing import Union

import numpy as np

from .config import REFERENCE_PARAMS
from .config import ConfigError
from .config import NetworkConfig
from .core import ops
from .core.rng import Rng
from .core.tensor import Tensor
from .expansion import expand_sequence
from .fusion import FusionRecord
from .fusion import FusionSchedule
from .fusion import fuse_sequence
from .fusion import merge_count
from .logging import get_logger
from .mamba import MambaBlockParams
from .mamba import mamba_block
from .serialization import ScanWindow
from .serialization import SerializationError
from .serialization import flatten
from .serialization import serialize
from .serialization import unflatten


logger = get_logger("network")


@dataclass(frozen=True)
class LayerShape:
    """Bookkeeping of one layer, as simulated or as realized.

    Attributes:
        layer: 1-based layer index
        n: Regions entering the layer
        grid: Spatial grid (rows, cols) per region at layer input
        channels: Channels at layer input
        rf: Receptive field (rows, cols) at layer input
        k: Regions merged away by fusion
        tokens_in: Sequence length at layer input
        tokens_out: Sequence length after fusion and expansion
        peak_live: Most tokens held at once inside the layer
    """

    layer: int
    n: int
    grid: tuple[int, int]
    channels: int
    rf: tuple[int, int]
    k: int
    tokens_in: int
    tokens_out: int
    peak_live: int

    @property
    def tokens_per_region(self) -> int:
        return self.grid[0] * self.grid[1] + 1


@dataclass
class Model:
    """Parameters of a built network.

    Attributes:
        config: Network description
        params: Named parameter tensors ("cls_init", "layers.<i>.<name>")
    """

    config: NetworkConfig
    params: dict[str, Tensor]

    @property
    def dtype(self):
        return self.params["cls_init"].dtype

    def block(self, index: int) -> Optional[MambaBlockParams]:
        """Block parameters of a 1-based layer index (None without Mamba)."""
        prefix = f"layers.{index}."
        named = {
            name[len(prefix) :]: tensor
            for name, tensor in self.params.items()
            if name.startswith(prefix)
        }
        if not named:
            return None
        return MambaBlockParams.from_named(named, self.config.ssm.norm_eps)

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.params.values())

    def with_params(self, params: dict[str, Tensor]) -> "Model":
        """Copy holding new tensors under the same names."""
        missing = set(self.params) - set(params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)[:5]}")
        return Model(config=self.config, params={k: params[k] for k in self.params})


@dataclass
class SlideEmbedding:
    """Output of a forward pass.

    Attributes:
        vector: Mean of the surviving CLS tokens [C_final]
        n_regions: Regions left after the last layer
        fusion: Per-layer fusion records
        shapes: Realized per-layer bookkeeping
    """

    vector: Tensor
    n_regions: int
    fusion: list[FusionRecord] = field(default_factory=list)
    shapes: list[LayerShape] = field(default_factory=list)


def build(
    config: NetworkConfig,
    rng: Rng,
    zero_out: bool = True,
    dtype=np.float64,
) -> Model:
    """Instantiate parameters for every layer of a config.

    Args:
        config: Validated network config
        rng: Stream for initialization
        zero_out: Zero each block's output projection (identity at init)
        dtype: float64 or float32

    Returns:
        Model
    """
    params: dict[str, Tensor] = {
        "cls_init": Tensor(
            rng.child(0).normal((config.init_channels,), 0.02), True, dtype
        )
    }
    ssm = config.ssm
    for index, layer in enumerate(config.layers, start=1):
        if not layer.has_mamba:
            continue
        block = MambaBlockParams.init(
            layer.channels,
            rng.child(index),
            state_size=ssm.state_size,
            expand=ssm.expand,
            conv_width=ssm.conv_width,
            shared_conv=ssm.shared_conv,
            zero_out=zero_out,
            norm_eps=ssm.norm_eps,
            dtype=dtype,
        )
        for name, tensor in block.named():
            params[f"layers.{index}.{name}"] = tensor

    model = Model(config=config, params=params)
    count = model.parameter_count()
    reference = REFERENCE_PARAMS.get(config.name)
    if reference:
        delta = (count - reference) / reference
        logger.info(
            f"Built {config.name}: {count:,} parameters "
            f"({delta:+.1%} vs {reference / 1e6:.1f}M)"
        )
    else:
        logger.info(f"Built {config.name}: {count:,} parameters")
    return model


def _check_dims(config: NetworkConfig, dims: tuple[int, int]) -> ScanWindow:
    window = config.scan_window
    height, width = dims
    if height < 1 or width < 1 or height % window.h or width % window.w:
        raise SerializationError(
            f"image {height}x{width} is not divisible by window {window}"
        )
    return window


def shape_trace(config: NetworkConfig, dims: tuple[int, int]) -> list[LayerShape]:
    """Closed-form per-layer counts for an image of dims (H, W); no tensors.

    Raises:
        SerializationError: If the image does not tile into windows
    """
    window = _check_dims(config, dims)
    n = (dims[0] // window.h) * (dims[1] // window.w)
    grid = (window.h, window.w)
    channels = config.init_channels
    rf = (1, 1)
    trace = []
    for index, layer in enumerate(config.layers, start=1):
        tokens_in = n * (grid[0] * grid[1] + 1)
        k = merge_count(n, config.alpha, config.depth) if layer.has_fusion else 0
        spec = layer.expansion
        after_grid = spec.grid_after(grid) if spec else grid
        tokens_out = (n - k) * (after_grid[0] * after_grid[1] + 1)
        # the block reads the sequence while writing a same-sized output
        peak = 2 * tokens_in if layer.has_mamba else tokens_in + tokens_out
        trace.append(
            LayerShape(
                layer=index,
                n=n,
                grid=grid,
                channels=channels,
                rf=rf,
                k=k,
                tokens_in=tokens_in,
                tokens_out=tokens_out,
                peak_live=peak,
            )
        )
        n -= k
        grid = after_grid
        if spec:
            channels = spec.channels_after(channels)
            rf = spec.rf_after(rf)
    return trace


def forward(model: Model, image: Union[Tensor, np.ndarray]) -> SlideEmbedding:
    """Embed one image [H, W, C_init].

    Raises:
        SerializationError: If the image does not tile into windows
    """
    config = model.config
    if not isinstance(image, Tensor):
        image = Tensor(image, dtype=model.dtype)
    if image.ndim != 3 or image.shape[2] != config.init_channels:
        raise SerializationError(
            f"image must be [H, W, {config.init_channels}], got {image.shape}"
        )
    _check_dims(config, image.shape[:2])

    seq = serialize(image, config.scan_window, model.params["cls_init"])
    schedule = FusionSchedule(alpha=config.alpha, layers=config.depth)
    shapes = []
    for index, layer in enumerate(config.layers, start=1):
        n = seq.n_regions
        grid = seq.regions[0].grid_shape
        channels = seq.channels
        rf = seq.rf
        tokens_in = seq.total_tokens

        if layer.has_mamba:
            tokens, _ = flatten(seq)
            tokens = mamba_block(tokens, model.block(index))
            seq = unflatten(seq, tokens)
        if layer.has_fusion:
            seq = fuse_sequence(seq, schedule, index, config.weighted_fusion)
        else:
            schedule.trace.append(FusionRecord(layer=index, n_before=n, k=0))
        if layer.expansion is not None:
            seq = expand_sequence(seq, layer.expansion, config.zero_pad)

        tokens_out = seq.total_tokens
        peak = 2 * tokens_in if layer.has_mamba else tokens_in + tokens_out
        shapes.append(
            LayerShape(
                layer=index,
                n=n,
                grid=grid,
                channels=channels,
                rf=rf,
                k=schedule.trace[-1].k,
                tokens_in=tokens_in,
                tokens_out=tokens_out,
                peak_live=peak,
            )
        )
        logger.debug(
            f"Layer {index}: {n} regions, {tokens_in} -> {tokens_out} tokens, "
            f"C={seq.channels}"
        )

    stacked = ops.concat(
        [ops.reshape(region.cls, (1, seq.channels)) for region in seq.regions], axis=0
    )
    return SlideEmbedding(
        vector=ops.mean(stacked, axis=0),
        n_regions=seq.n_regions,
        fusion=schedule.trace,
        shapes=shapes,
    )


def memory_law(trace: list[LayerShape]) -> tuple[bool, bool]:
    """Check the token bookkeeping of a trace.

    Returns:
        Tuple of (peak live tokens stay within twice the initial length,
        length never grows across a layer that fused or expanded)
    """
    if not trace:
        return True, True
    initial = trace[0].tokens_in
    bounded = all(shape.peak_live <= 2 * initial for shape in trace)
    shrinking = all(shape.tokens_out <= shape.tokens_in for shape in trace)
    return bounded, shrinking
