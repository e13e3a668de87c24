"""Tests for region fusion."""

import numpy as np
import pytest

from pixel_mamba.core.tensor import Tensor
from pixel_mamba.fusion import FusionError
from pixel_mamba.fusion import FusionSchedule
from pixel_mamba.fusion import SimilarityMatrix
from pixel_mamba.fusion import cls_similarity
from pixel_mamba.fusion import fuse_sequence
from pixel_mamba.fusion import fuse_topk
from pixel_mamba.fusion import greedy_pairs
from pixel_mamba.fusion import merge_count
from pixel_mamba.fusion import merge_regions
from pixel_mamba.fusion import split_gallery_probe
from pixel_mamba.serialization import Region
from pixel_mamba.serialization import TokenSequence

from .conftest import assert_close


def region(value: float, cls, origin=(0, 0), members: int = 1) -> Region:
    """1x1 region with one channel per CLS entry."""
    cls = np.asarray(cls, dtype=np.float64)
    grid = np.full((1, 1, cls.size), value)
    return Region(grid=Tensor(grid), cls=Tensor(cls), origin=origin, members=members)


def sequence(*regions: Region) -> TokenSequence:
    return TokenSequence(regions=regions, channels=regions[0].channels, rf=(1, 1))


class TestMergeCount:
    """Test the per-layer merge count."""

    def test_reference_values(self):
        assert merge_count(60, 0.8, 24) == 2
        assert merge_count(24, 0.8, 24) == 1

    def test_nothing_to_pair(self):
        assert merge_count(1, 0.8, 24) == 0
        assert merge_count(0, 0.8, 24) == 0

    def test_clamped_to_half(self):
        assert merge_count(3, 0.99, 1) == 1
        assert merge_count(10, 0.9, 1) == 5

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
    def test_alpha_range(self, alpha):
        with pytest.raises(FusionError):
            merge_count(10, alpha, 24)

    def test_region_counts_never_increase(self):
        schedule = FusionSchedule(alpha=0.8, layers=24)
        counts = schedule.region_counts(400)
        assert counts == sorted(counts, reverse=True)
        assert len(counts) == 24
        assert min(counts) >= 1


class TestGalleryProbe:
    """Test the sequence-order split."""

    def test_even(self):
        regions = [region(i, [1.0]) for i in range(4)]
        gallery, probe = split_gallery_probe(regions)
        assert gallery == regions[:2]
        assert probe == regions[2:]

    def test_odd_goes_to_gallery(self):
        gallery, probe = split_gallery_probe([region(i, [1.0]) for i in range(5)])
        assert (len(gallery), len(probe)) == (3, 2)

    def test_pair(self):
        regions = [region(0, [1.0]), region(1, [1.0])]
        assert split_gallery_probe(regions) == ([regions[0]], [regions[1]])


class TestSimilarity:
    """Test CLS cosine similarity."""

    def test_identical(self):
        sim = cls_similarity([region(0, [0.3, 0.4])], [region(0, [0.3, 0.4])])
        assert sim.values[0, 0] == pytest.approx(1.0)

    def test_orthogonal(self):
        sim = cls_similarity([region(0, [1.0, 0.0])], [region(0, [0.0, 2.0])])
        assert sim.values[0, 0] == pytest.approx(0.0)

    def test_half_angle(self):
        sim = cls_similarity([region(0, [1.0, 0.0])], [region(0, [1.0, 1.0])])
        assert sim.values[0, 0] == pytest.approx(0.70711, abs=1e-5)

    def test_zero_norm(self):
        sim = cls_similarity([region(0, [0.0, 0.0])], [region(0, [1.0, 1.0])])
        assert sim.values[0, 0] == 0.0

    def test_shape(self):
        gallery = [region(0, [1.0, 0.0]) for _ in range(3)]
        probe = [region(0, [0.0, 1.0]) for _ in range(2)]
        assert cls_similarity(gallery, probe).shape == (3, 2)


class TestGreedyPairs:
    """Test one-to-one pair selection."""

    def test_one_to_one(self):
        sim = SimilarityMatrix(np.array([[0.9, 0.8], [0.85, 0.1]]))
        pairs = greedy_pairs(sim, 2)
        assert [(i, j) for i, j, _ in pairs] == [(0, 0), (1, 1)]

    def test_ties_prefer_smaller_indices(self):
        sim = SimilarityMatrix(np.full((2, 2), 0.5))
        pairs = greedy_pairs(sim, 1)
        assert pairs == [(0, 0, 0.5)]


class TestMerge:
    """Test averaging of merged regions."""

    def test_arithmetic_mean(self):
        merged = merge_regions(region(1.0, [1.0]), region(3.0, [3.0]))
        assert_close(merged.grid, [[[2.0]]])
        assert merged.members == 2

    def test_identical_regions(self):
        a = region(0.7, [0.1, 0.2], origin=(0, 0))
        b = region(0.7, [0.1, 0.2], origin=(8, 8))
        merged = merge_regions(a, b)
        assert_close(merged.grid, a.grid.numpy())
        assert_close(merged.cls, a.cls.numpy())
        assert merged.origin == (0, 0)

    def test_weighted_by_members(self):
        """A region absorbing three windows outweighs a single window."""
        merged = merge_regions(region(0.0, [1.0], members=3), region(4.0, [1.0]))
        assert_close(merged.grid, [[[1.0]]])
        assert merged.members == 4

    def test_unweighted(self):
        merged = merge_regions(
            region(0.0, [1.0], members=3), region(4.0, [1.0]), weighted=False
        )
        assert_close(merged.grid, [[[2.0]]])

    def test_grid_mismatch(self):
        a = region(0.0, [1.0])
        b = Region(grid=Tensor(np.zeros((2, 1, 1))), cls=Tensor([1.0]), origin=(0, 0))
        with pytest.raises(FusionError):
            merge_regions(a, b)


class TestFuseTopk:
    """Test one fusion step over a region list."""

    def test_k_zero_is_noop(self):
        regions = [region(i, [1.0, i]) for i in range(4)]
        kept, pairs, sims = fuse_topk(regions, 0)
        assert kept == regions
        assert pairs == [] and sims == []

    def test_most_similar_pair_merges(self):
        regions = [
            region(1.0, [1.0, 0.0]),
            region(2.0, [0.0, 1.0]),
            region(3.0, [0.0, 1.0]),
            region(4.0, [-1.0, 0.0]),
        ]
        kept, pairs, sims = fuse_topk(regions, 1)
        assert pairs == [(1, 2)]
        assert sims == [pytest.approx(1.0)]
        assert len(kept) == 3
        assert_close(kept[1].grid, [[[2.5]]])
        assert kept[2] is regions[3]

    def test_order_preserved(self):
        regions = [region(float(i), [1.0, 0.1 * i], origin=(0, i)) for i in range(6)]
        kept, _, _ = fuse_topk(regions, 2)
        origins = [r.origin for r in kept]
        assert len(kept) == 4
        assert origins == sorted(origins)

    def test_too_many_pairs(self):
        with pytest.raises(FusionError):
            fuse_topk([region(0, [1.0]) for _ in range(3)], 2)


class TestFuseSequence:
    """Test fusion on a token sequence with tracing."""

    def test_records_trace(self):
        seq = sequence(*(region(float(i), [1.0, i]) for i in range(4)))
        schedule = FusionSchedule(alpha=0.8, layers=2)
        fused = fuse_sequence(seq, schedule, layer=1)
        record = schedule.trace[-1]
        assert record.n_before == 4
        assert record.k == 2
        assert record.n_after == fused.n_regions == 2
        assert len(record.pairs) == len(record.similarities) == 2

    def test_single_region_untouched(self):
        seq = sequence(region(1.0, [1.0]))
        schedule = FusionSchedule(alpha=0.8, layers=24)
        assert fuse_sequence(seq, schedule, layer=1).n_regions == 1
        assert schedule.trace[-1].k == 0

    def test_invalid_schedule(self):
        with pytest.raises(FusionError):
            FusionSchedule(alpha=0.8, layers=0)
