"""Shared test fixtures for Pixel-Mamba tests."""

import numpy as np
import pytest

from pixel_mamba.config import SynthSpec
from pixel_mamba.config import load_config
from pixel_mamba.core.rng import Rng


@pytest.fixture
def rng():
    """Seeded random stream."""
    return Rng(1234)


@pytest.fixture
def tiny_config():
    """Four-layer network over 8x8 windows."""
    return load_config("tiny-4")


@pytest.fixture
def tiny_spec():
    """Small synthetic dataset recipe that tiles into 8x8 windows."""
    return SynthSpec(height=16, width=16, window="8x8", n_classes=2, t_bins=3)


@pytest.fixture
def small_image(rng):
    """16x16 RGB image in [0, 1]."""
    return rng.child(99).uniform((16, 16, 3), 0.0, 1.0)


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path, monkeypatch):
    """Keep log files and user settings inside the test's temp directory."""
    monkeypatch.setenv("PIXELMAMBA_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.delenv("PIXELMAMBA_SEED", raising=False)
    monkeypatch.delenv("PIXELMAMBA_DTYPE", raising=False)
    monkeypatch.delenv("PIXELMAMBA_WORKERS", raising=False)
    monkeypatch.setenv("HOME", str(tmp_path / "home"))
    return tmp_path / "logs"


def assert_close(actual, expected, rtol=1e-9, atol=1e-12):
    """Compare tensors or arrays elementwise."""
    actual = actual.numpy() if hasattr(actual, "numpy") else actual
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=atol)
