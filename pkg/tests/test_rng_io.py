"""Tests for seeded streams and the tensor file format."""

import struct

import numpy as np
import pytest

from pixel_mamba.core.io import MAGIC
from pixel_mamba.core.io import TensorFileError
from pixel_mamba.core.io import decode_tensor
from pixel_mamba.core.io import encode_tensor
from pixel_mamba.core.io import load_tensor
from pixel_mamba.core.io import save_tensor
from pixel_mamba.core.rng import Rng
from pixel_mamba.core.tensor import Tensor


class TestRng:
    """Test reproducibility of random streams."""

    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(5).normal((4,)), Rng(5).normal((4,)))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(5).normal((4,)), Rng(6).normal((4,)))

    def test_children_are_stable_and_distinct(self):
        """child(i) depends only on the seed and the index path."""
        parent = Rng(3)
        parent.normal((10,))
        a = parent.child(1).uniform((3,))
        b = Rng(3).child(1).uniform((3,))
        c = Rng(3).child(2).uniform((3,))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_nested_children(self):
        assert np.array_equal(
            Rng(0).child(1).child(2).normal((2,)),
            Rng(0).child(1).child(2).normal((2,)),
        )
        assert not np.array_equal(
            Rng(0).child(1).child(2).normal((2,)),
            Rng(0).child(2).child(1).normal((2,)),
        )

    def test_bernoulli_extremes(self):
        assert Rng(1).bernoulli(0.0, 20).sum() == 0
        assert Rng(1).bernoulli(1.0, 20).sum() == 20

    def test_permutation_is_complete(self):
        assert sorted(Rng(2).permutation(9)) == list(range(9))

    def test_seed_range(self):
        with pytest.raises(ValueError):
            Rng(-1)


class TestTensorFiles:
    """Test the binary tensor layout."""

    def test_header_layout(self):
        """Magic, version, dtype tag, rank, extents, then row-major values."""
        blob = encode_tensor(Tensor(np.arange(6, dtype=np.float64).reshape(2, 3)))
        assert blob[:4] == MAGIC
        version, tag, rank = struct.unpack_from("<III", blob, 4)
        assert (version, tag, rank) == (1, 2, 2)
        assert struct.unpack_from("<2Q", blob, 16) == (2, 3)
        assert np.frombuffer(blob[32:], dtype="<f8").tolist() == [0, 1, 2, 3, 4, 5]

    def test_float32_is_preserved(self, tmp_path):
        values = np.linspace(0, 1, 8, dtype=np.float32).reshape(2, 2, 2)
        path = save_tensor(tmp_path / "deep" / "x.pxmt", values)
        loaded = load_tensor(path)
        assert loaded.dtype == np.float32
        assert np.array_equal(loaded.numpy(), values)

    def test_bad_magic(self):
        blob = bytearray(encode_tensor(np.ones(2)))
        blob[:4] = b"NOPE"
        with pytest.raises(TensorFileError):
            decode_tensor(bytes(blob))

    def test_truncated_payload(self):
        blob = encode_tensor(np.ones((3, 3)))
        with pytest.raises(TensorFileError):
            decode_tensor(blob[:-8])

    def test_rank_beyond_header(self):
        """A rank with no extents behind it is a truncated header."""
        blob = MAGIC + struct.pack("<III", 1, 2, 50)
        with pytest.raises(TensorFileError, match="truncated header"):
            decode_tensor(blob)

    def test_unsupported_dtype(self):
        with pytest.raises(TensorFileError):
            encode_tensor(np.ones(3, dtype=np.int32))

    def test_missing_file(self, tmp_path):
        with pytest.raises(TensorFileError):
            load_tensor(tmp_path / "absent.pxmt")
