"""Seeded random streams.

All randomness goes through Rng, which wraps numpy's PCG64 bit
generator. PCG64 output is specified bit-for-bit, so an identical seed
gives an identical stream on every platform.
"""

from typing import Sequence

import numpy as np


ALGORITHM = "PCG64"


class Rng:
    """Portable pseudo-random stream.

    Attributes:
        seed: 64-bit seed the stream was created from
        algorithm: Name of the bit generator
    """

    def __init__(self, seed: int = 0, _key: tuple[int, ...] = ()):
        """Initialize a stream.

        Args:
            seed: Non-negative integer below 2**64
        """
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.algorithm = ALGORITHM
        self._key = _key
        sequence = np.random.SeedSequence(self.seed, spawn_key=_key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, index: int) -> "Rng":
        """Independent sub-stream, stable for a given (seed, index) path."""
        return Rng(self.seed, self._key + (int(index),))

    def normal(self, shape: Sequence[int], scale: float = 1.0) -> np.ndarray:
        return self._generator.normal(0.0, scale, size=tuple(shape))

    def uniform(
        self, shape: Sequence[int], low: float = 0.0, high: float = 1.0
    ) -> np.ndarray:
        return self._generator.uniform(low, high, size=tuple(shape))

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def bernoulli(self, p: float, size: int) -> np.ndarray:
        return (self._generator.random(size) < p).astype(np.int64)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, algorithm={self.algorithm}, key={self._key})"
