"""Configuration management for Pixel-Mamba.

This module handles:
- Network configs: the `.cfg` text format (key/value header plus a layer
  table) and the bundled 6M/21M/tiny configs
- Training presets (desk, finetune, pretrain)
- Synthetic dataset specs (YAML)
- Run settings (seed, dtype, workers) with environment variable overrides
"""

import os
from enum import Enum
from pathlib import Path
from typing import Optional
from typing import Union

import numpy as np
import yaml
from pydantic import BaseModel
from pydantic import Field
from pydantic import ValidationError as PydanticValidationError
from pydantic import field_validator
from pydantic import model_validator

from .errors import ValidationError
from .expansion import ExpansionSpec
from .serialization import ScanWindow


CONFIG_DIR = Path(__file__).parent / "configs"
BUNDLED_CONFIGS = ("pixelmamba-6m", "pixelmamba-21m", "tiny-4", "tiny-8")

# Parameter counts the bundled configs are sized after
REFERENCE_PARAMS = {"pixelmamba-6m": 6.2e6, "pixelmamba-21m": 21e6}


class ConfigError(ValidationError):
    """Raised when a config file or settings value is invalid."""

    pass


def _parse_pair(text: str, what: str) -> tuple[int, int]:
    try:
        window = ScanWindow.parse(text)
    except ValidationError:
        raise ConfigError(f"invalid {what} '{text}'") from None
    return window.h, window.w


class SsmSettings(BaseModel):
    """Hyper-parameters of the state-space blocks."""

    state_size: int = 16
    expand: int = 2
    conv_width: int = 4
    shared_conv: bool = False
    norm_eps: float = 1e-5

    @field_validator("state_size", "expand", "conv_width")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """Sizes must be at least 1."""
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("norm_eps")
    @classmethod
    def validate_eps(cls, v: float) -> float:
        """Norm epsilon must be positive."""
        if v <= 0:
            raise ValueError(f"norm_eps must be > 0, got {v}")
        return v


class LayerSpec(BaseModel):
    """One row of a layer table.

    Attributes:
        has_mamba: Run a Mamba block
        has_fusion: Run region fusion
        te: Token expansion as 'h:cat', 'v:avg', ... or None
        channels: Declared channel count at layer input
        token: Declared receptive field (rows, cols) at layer input
    """

    has_mamba: bool = True
    has_fusion: bool = True
    te: Optional[str] = None
    channels: int
    token: tuple[int, int]

    @field_validator("te")
    @classmethod
    def validate_te(cls, v: Optional[str]) -> Optional[str]:
        """Normalize the expansion to its short form."""
        if v is None or v in ("none", "none:-", "-"):
            return None
        try:
            return str(ExpansionSpec.parse(v))
        except ValidationError as e:
            raise ValueError(str(e)) from None

    @property
    def expansion(self) -> Optional[ExpansionSpec]:
        return ExpansionSpec.parse(self.te) if self.te else None

    def to_line(self) -> str:
        words = []
        if self.has_mamba:
            words.append("mamba")
        if self.has_fusion:
            words.append("rf")
        words.append(f"te={self.te or 'none:-'}")
        words.append(f"channels={self.channels}")
        words.append(f"token={self.token[0]}x{self.token[1]}")
        return " ".join(words)


class NetworkConfig(BaseModel):
    """Declarative description of a Pixel-Mamba stack.

    The declared channels and token columns are checked against the
    trajectory the expansion steps imply.
    """

    name: str = "custom"
    window: str = "224x224"
    init_channels: int = 3
    alpha: float = 0.8
    weighted_fusion: bool = True
    zero_pad: bool = False
    ssm: SsmSettings = Field(default_factory=SsmSettings)
    layers: list[LayerSpec]

    @field_validator("window")
    @classmethod
    def validate_window(cls, v: str) -> str:
        """Canonicalize to HxW."""
        try:
            return str(ScanWindow.parse(v))
        except ValidationError as e:
            raise ValueError(str(e)) from None

    @field_validator("alpha")
    @classmethod
    def validate_alpha(cls, v: float) -> float:
        """Alpha must lie strictly between 0 and 1."""
        if not 0.0 < v < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {v}")
        return v

    @model_validator(mode="after")
    def validate_trajectory(self) -> "NetworkConfig":
        """Check declared columns and window divisibility."""
        if not self.layers:
            raise ConfigError("a network needs at least one layer")
        channels = self.init_channels
        rf = (1, 1)
        for index, layer in enumerate(self.layers, start=1):
            if layer.channels != channels:
                raise ConfigError(
                    f"layer {index}: declared channels {layer.channels}, "
                    f"trajectory gives {channels}"
                )
            if tuple(layer.token) != rf:
                raise ConfigError(
                    f"layer {index}: declared token {layer.token[0]}x"
                    f"{layer.token[1]}, trajectory gives {rf[0]}x{rf[1]}"
                )
            spec = layer.expansion
            if spec is not None:
                channels = spec.channels_after(channels)
                rf = spec.rf_after(rf)
        stride_h, stride_w = rf
        window = self.scan_window
        if window.h % stride_h or window.w % stride_w:
            raise ConfigError(
                f"window {window} is not divisible by the expansion stride "
                f"{stride_h}x{stride_w}"
            )
        return self

    @property
    def scan_window(self) -> ScanWindow:
        return ScanWindow.parse(self.window)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def stride(self) -> tuple[int, int]:
        """Total downsampling (rows, cols) of the expansion steps."""
        rf = (1, 1)
        for layer in self.layers:
            if layer.expansion is not None:
                rf = layer.expansion.rf_after(rf)
        return rf

    @property
    def final_channels(self) -> int:
        channels = self.init_channels
        for layer in self.layers:
            if layer.expansion is not None:
                channels = layer.expansion.channels_after(channels)
        return channels

    def with_window(self, window: Union[str, ScanWindow]) -> "NetworkConfig":
        """Copy with another scan window (revalidated)."""
        data = self.model_dump()
        data["window"] = str(window)
        return build_network_config(data)


def build_network_config(data: dict) -> NetworkConfig:
    """Validate a dict into a NetworkConfig, raising ConfigError on failure."""
    try:
        return NetworkConfig(**data)
    except PydanticValidationError as e:
        raise ConfigError(f"invalid network config: {e}") from None


_HEADER_KEYS = (
    "name",
    "window",
    "init_channels",
    "alpha",
    "weighted_fusion",
    "zero_pad",
    "state_size",
    "expand",
    "conv_width",
    "shared_conv",
    "norm_eps",
)
_SSM_KEYS = ("state_size", "expand", "conv_width", "shared_conv", "norm_eps")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key: str, text: str):
    if key in ("weighted_fusion", "zero_pad", "shared_conv"):
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"{key} must be true or false, got '{text}'")
        return text.lower() == "true"
    if key in ("init_channels", "state_size", "expand", "conv_width"):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got '{text}'") from None
    if key in ("alpha", "norm_eps"):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got '{text}'") from None
    return text


def _parse_layer(line: str, number: int) -> dict:
    layer: dict = {"has_mamba": False, "has_fusion": False}
    for word in line.split():
        if word == "mamba":
            layer["has_mamba"] = True
        elif word == "rf":
            layer["has_fusion"] = True
        elif word.startswith("te="):
            layer["te"] = word[3:]
        elif word.startswith("channels="):
            try:
                layer["channels"] = int(word[9:])
            except ValueError:
                raise ConfigError(f"line {number}: bad channels '{word}'") from None
        elif word.startswith("token="):
            layer["token"] = _parse_pair(word[6:], "token")
        else:
            raise ConfigError(f"line {number}: unknown layer field '{word}'")
    for required in ("channels", "token"):
        if required not in layer:
            raise ConfigError(f"line {number}: missing {required}=")
    return layer


def parse_cfg(text: str) -> NetworkConfig:
    """Parse the `.cfg` text format.

    Example:
        name = tiny-4
        window = 8x8
        [layers]
        mamba rf te=h:cat channels=3 token=1x1

    Raises:
        ConfigError: On syntax errors or an inconsistent layer table
    """
    header: dict = {}
    layers: list[dict] = []
    in_layers = False
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[layers]":
            in_layers = True
            continue
        if in_layers:
            layers.append(_parse_layer(line, number))
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _HEADER_KEYS:
            raise ConfigError(f"line {number}: unknown key '{key}'")
        header[key] = _parse_value(key, value)

    ssm = {key: header.pop(key) for key in _SSM_KEYS if key in header}
    return build_network_config({**header, "ssm": ssm, "layers": layers})


def dump_cfg(config: NetworkConfig) -> str:
    """Render a config in canonical `.cfg` form (parse_cfg inverts it)."""
    values = {
        "name": config.name,
        "window": config.window,
        "init_channels": config.init_channels,
        "alpha": config.alpha,
        "weighted_fusion": config.weighted_fusion,
        "zero_pad": config.zero_pad,
        **config.ssm.model_dump(),
    }
    lines = [f"{key} = {_format_value(values[key])}" for key in _HEADER_KEYS]
    lines.append("")
    lines.append("[layers]")
    lines.extend(layer.to_line() for layer in config.layers)
    return "\n".join(lines) + "\n"


def load_config(name_or_path: Union[str, Path]) -> NetworkConfig:
    """Load a bundled config by name or a `.cfg` file by path.

    Raises:
        ConfigError: If the file does not exist or is invalid
    """
    path = Path(name_or_path)
    if not path.exists():
        bundled = CONFIG_DIR / f"{name_or_path}.cfg"
        if not bundled.exists():
            raise ConfigError(
                f"config '{name_or_path}' not found "
                f"(bundled: {', '.join(BUNDLED_CONFIGS)})"
            )
        path = bundled
    return parse_cfg(path.read_text(encoding="utf-8"))


class Task(str, Enum):
    """Supervised task a head is trained for."""

    CLASSIFY = "classify"
    SURVIVE = "survive"


class TrainConfig(BaseModel):
    """Optimizer and schedule settings for a training run."""

    preset: str = "desk"
    epochs: int = 200
    lr: float = 4e-4
    weight_decay: float = 0.05
    accumulation: int = 8
    cosine: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.0
    hflip: bool = False
    workers: int = 1
    seed: int = 0
    checkpoint: Optional[Path] = None

    @field_validator("epochs", "accumulation", "workers")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        """Counts must be at least 1."""
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @field_validator("lr")
    @classmethod
    def validate_lr(cls, v: float) -> float:
        """Learning rate must be positive."""
        if v <= 0:
            raise ValueError(f"lr must be > 0, got {v}")
        return v

    @field_validator("label_smoothing")
    @classmethod
    def validate_smoothing(cls, v: float) -> float:
        """Label smoothing lies in [0, 1)."""
        if not 0.0 <= v < 1.0:
            raise ValueError(f"label_smoothing must lie in [0, 1), got {v}")
        return v

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        """Build a config from a named preset plus explicit overrides.

        Raises:
            ConfigError: For unknown presets or invalid values
        """
        if name not in TRAIN_PRESETS:
            raise ConfigError(
                f"unknown preset '{name}'. Valid presets: {', '.join(TRAIN_PRESETS)}"
            )
        data = {**TRAIN_PRESETS[name], "preset": name}
        data.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**data)
        except PydanticValidationError as e:
            raise ConfigError(f"invalid training config: {e}") from None


TRAIN_PRESETS: dict[str, dict] = {
    "desk": {"lr": 4e-4, "epochs": 200, "accumulation": 8, "weight_decay": 0.05},
    "finetune": {"lr": 4e-4, "epochs": 100, "accumulation": 8, "weight_decay": 0.05},
    "pretrain": {
        "lr": 1e-3,
        "epochs": 300,
        "accumulation": 8,
        "weight_decay": 0.05,
        "label_smoothing": 0.1,
        "hflip": True,
    },
}


def default_motif() -> list[list[int]]:
    """A 3x3 plus sign."""
    return [[0, 1, 0], [1, 1, 1], [0, 1, 0]]


def default_decoy() -> list[list[int]]:
    """A 3x3 diagonal, planted at the same density for every class."""
    return [[1, 0, 0], [0, 1, 0], [0, 0, 1]]


class SynthSpec(BaseModel):
    """Recipe for a synthetic slide dataset.

    Labels depend on the density of a motif shape. A decoy shape can be
    planted at a constant density so that bright-pixel counts alone do not
    give the label away.
    """

    height: int = 64
    width: int = 64
    window: str = "16x16"
    channels: int = 3
    n_classes: int = 4
    densities: Optional[list[float]] = None
    motif: list[list[int]] = Field(default_factory=default_motif)
    decoy: list[list[int]] = Field(default_factory=default_decoy)
    decoy_density: float = 0.0
    noise: float = 0.05
    t_bins: int = 4
    censor_rate: float = 0.3
    seed: int = 0

    @field_validator("densities")
    @classmethod
    def validate_densities(cls, v: Optional[list[float]]) -> Optional[list[float]]:
        """Densities are fractions."""
        if v is not None and any(not 0.0 <= d <= 1.0 for d in v):
            raise ValueError(f"densities must lie in [0, 1], got {v}")
        return v

    @field_validator("decoy_density", "censor_rate")
    @classmethod
    def validate_fraction(cls, v: float) -> float:
        """Fractions lie in [0, 1]."""
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"must lie in [0, 1], got {v}")
        return v

    @field_validator("n_classes", "t_bins", "channels")
    @classmethod
    def validate_count(cls, v: int) -> int:
        """Counts must be at least 1."""
        if v < 1:
            raise ValueError(f"must be >= 1, got {v}")
        return v

    @model_validator(mode="after")
    def validate_layout(self) -> "SynthSpec":
        """Image must tile into windows; class densities must match classes."""
        window = self.scan_window
        if self.height % window.h or self.width % window.w:
            raise ConfigError(
                f"image {self.height}x{self.width} is not divisible by window {window}"
            )
        if self.densities is not None and len(self.densities) != self.n_classes:
            raise ConfigError(
                f"{len(self.densities)} densities given for {self.n_classes} classes"
            )
        return self

    @property
    def scan_window(self) -> ScanWindow:
        return ScanWindow.parse(self.window)

    def class_densities(self) -> list[float]:
        """Motif density per class; class 0 is pure noise."""
        if self.densities is not None:
            return list(self.densities)
        return [0.6 * c / max(1, self.n_classes - 1) for c in range(self.n_classes)]


def load_synth_spec(path: Union[str, Path]) -> SynthSpec:
    """Load a SynthSpec from a YAML file.

    Raises:
        ConfigError: If the file is missing or invalid
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"synth spec not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML parsing error in {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"invalid YAML structure in {path}")
    try:
        return SynthSpec(**data)
    except PydanticValidationError as e:
        raise ConfigError(f"invalid synth spec {path}: {e}") from None


DTYPES = {"float64": np.float64, "float32": np.float32}


class RunSettings(BaseModel):
    """Settings shared by every command."""

    seed: int = 0
    dtype: str = "float64"
    workers: int = 1

    @field_validator("dtype")
    @classmethod
    def validate_dtype(cls, v: str) -> str:
        """Only float32 and float64 are supported."""
        if v not in DTYPES:
            raise ValueError(f"dtype must be one of {', '.join(DTYPES)}, got {v}")
        return v

    @field_validator("workers")
    @classmethod
    def validate_workers(cls, v: int) -> int:
        """At least one worker."""
        if v < 1:
            raise ValueError(f"workers must be >= 1, got {v}")
        return v

    @property
    def numpy_dtype(self):
        return DTYPES[self.dtype]


class ConfigManager:
    """Manages the settings file and effective run settings."""

    def __init__(self, config_dir: Optional[Path] = None):
        """Initialize config manager.

        Args:
            config_dir: Config directory path (defaults to ~/.pixel-mamba)
        """
        self.config_dir = config_dir or Path.home() / ".pixel-mamba"
        self.config_file = self.config_dir / "settings.yaml"
        self._settings: Optional[RunSettings] = None

    def exists(self) -> bool:
        """Check if the settings file exists."""
        return self.config_file.exists()

    def load(self) -> RunSettings:
        """Load settings from file, or defaults when there is none.

        Raises:
            ConfigError: If the settings file is invalid
        """
        if self._settings:
            return self._settings
        if not self.config_file.exists():
            self._settings = RunSettings()
            return self._settings
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
            self._settings = RunSettings(**data)
            return self._settings
        except (yaml.YAMLError, PydanticValidationError, TypeError) as e:
            raise ConfigError(f"Failed to load settings: {e}") from None

    def save(self, settings: RunSettings) -> None:
        """Save settings to file."""
        self.config_dir.mkdir(parents=True, exist_ok=True)
        with open(self.config_file, "w", encoding="utf-8") as f:
            yaml.dump(
                settings.model_dump(), f, default_flow_style=False, sort_keys=False
            )
        self._settings = settings

    def _resolve(self, field: str, override, env_var: str):
        # Priority: CLI flag > environment > settings file > default
        if override is not None:
            value = override
        elif os.getenv(env_var):
            value = os.getenv(env_var)
        else:
            return getattr(self.load(), field)
        try:
            return getattr(RunSettings(**{field: value}), field)
        except PydanticValidationError:
            raise ConfigError(
                f"Invalid {field} from {env_var} or flag: {value}"
            ) from None

    def get_effective_seed(self, override: Optional[int] = None) -> int:
        """Seed from --seed, PIXELMAMBA_SEED, the settings file, or 0."""
        return self._resolve("seed", override, "PIXELMAMBA_SEED")

    def get_effective_dtype(self, override: Optional[str] = None) -> str:
        """Dtype from --dtype, PIXELMAMBA_DTYPE, the settings file, or float64."""
        return self._resolve("dtype", override, "PIXELMAMBA_DTYPE")

    def get_effective_workers(self, override: Optional[int] = None) -> int:
        """Workers from --workers, PIXELMAMBA_WORKERS, the settings file, or 1."""
        return self._resolve("workers", override, "PIXELMAMBA_WORKERS")

    def get_effective_settings(
        self,
        seed: Optional[int] = None,
        dtype: Optional[str] = None,
        workers: Optional[int] = None,
    ) -> RunSettings:
        return RunSettings(
            seed=self.get_effective_seed(seed),
            dtype=self.get_effective_dtype(dtype),
            workers=self.get_effective_workers(workers),
        )
