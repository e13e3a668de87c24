"""Finite-difference checks of the tape gradients."""

from dataclasses import replace

import numpy as np
import pytest

from pixel_mamba.core import ops
from pixel_mamba.core.gradcheck import check_gradients
from pixel_mamba.core.gradcheck import relative_error
from pixel_mamba.core.gradcheck import weighted_sum
from pixel_mamba.core.rng import Rng
from pixel_mamba.core.tensor import Tensor
from pixel_mamba.expansion import ExpansionSpec
from pixel_mamba.expansion import expand
from pixel_mamba.fusion import fuse_topk
from pixel_mamba.heads import SurvivalRecord
from pixel_mamba.heads import cross_entropy
from pixel_mamba.heads import survival_nll
from pixel_mamba.mamba import MambaBlockParams
from pixel_mamba.mamba import mamba_block
from pixel_mamba.mamba import scan
from pixel_mamba.network import build
from pixel_mamba.network import forward
from pixel_mamba.serialization import ScanWindow
from pixel_mamba.serialization import serialize


def leaf(rng: Rng, shape, scale=1.0, shift=0.0) -> Tensor:
    return Tensor(rng.normal(shape, scale) + shift, requires_grad=True)


UNARY = {
    "exp": ops.exp,
    "sigmoid": ops.sigmoid,
    "softplus": ops.softplus,
    "silu": ops.silu,
    "neg": ops.neg,
    "flip": lambda x: ops.flip(x, axis=0),
    "cumsum": lambda x: ops.cumsum(x, axis=0),
    "transpose": lambda x: ops.transpose(x, (1, 0)),
    "reshape": lambda x: ops.reshape(x, (2, 6)),
    "take": lambda x: ops.take(x, [2, 0, 2], axis=0),
    "getitem": lambda x: x[1:3],
    "mean": lambda x: ops.mean(x, axis=1),
    "logsumexp": lambda x: ops.logsumexp(x, axis=-1),
}


class TestPrimitiveGradients:
    """Every primitive should match central differences."""

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name):
        rng = Rng(7)
        x = leaf(rng.child(0), (4, 3))
        weights = rng.child(1).normal(UNARY[name](x).shape)

        report = check_gradients(
            lambda t: weighted_sum(UNARY[name](t), weights), [x], rtol=1e-5
        )
        assert report.checked > 0
        assert report.passed(), report.failures

    def test_log_and_power(self):
        rng = Rng(8)
        x = leaf(rng, (5,), scale=0.2, shift=2.0)
        report = check_gradients(
            lambda t: ops.sum(ops.add(ops.log(t), ops.power(t, -0.5))), [x], rtol=1e-5
        )
        assert report.passed(), report.failures

    def test_binary_with_broadcast(self):
        rng = Rng(9)
        a = leaf(rng.child(0), (3, 4))
        b = leaf(rng.child(1), (4,), scale=0.3, shift=2.0)
        weights = rng.child(2).normal((3, 4))

        def fn(x, y):
            return weighted_sum(ops.add(ops.mul(x, y), ops.div(x, y)), weights)

        report = check_gradients(fn, [a, b], rtol=1e-5)
        assert report.passed(), report.failures

    def test_matmul(self):
        rng = Rng(10)
        a = leaf(rng.child(0), (3, 4))
        b = leaf(rng.child(1), (4, 2))
        weights = rng.child(2).normal((3, 2))
        report = check_gradients(
            lambda x, y: weighted_sum(ops.matmul(x, y), weights), [a, b], rtol=1e-5
        )
        assert report.passed(), report.failures

    def test_rms_norm(self):
        rng = Rng(11)
        x = leaf(rng.child(0), (4, 5))
        gamma = leaf(rng.child(1), (5,), scale=0.1, shift=1.0)
        weights = rng.child(2).normal((4, 5))
        report = check_gradients(
            lambda t, g: weighted_sum(ops.rms_norm(t, g), weights),
            [x, gamma],
            rtol=1e-5,
        )
        assert report.passed(), report.failures

    def test_causal_conv(self):
        rng = Rng(12)
        x = leaf(rng.child(0), (6, 3))
        kernel = leaf(rng.child(1), (3, 4))
        weights = rng.child(2).normal((6, 3))
        report = check_gradients(
            lambda t, k: weighted_sum(ops.causal_depthwise_conv1d(t, k), weights),
            [x, kernel],
            rtol=1e-5,
        )
        assert report.passed(), report.failures

    def test_concat(self):
        rng = Rng(13)
        a = leaf(rng.child(0), (2, 3))
        b = leaf(rng.child(1), (1, 3))
        weights = rng.child(2).normal((3, 3))
        report = check_gradients(
            lambda x, y: weighted_sum(ops.concat([x, y], axis=0), weights),
            [a, b],
            rtol=1e-5,
        )
        assert report.passed(), report.failures


class TestScanGradients:
    """The hand-written scan backward against finite differences."""

    def test_all_operands(self):
        rng = Rng(21)
        length, inner, state = 6, 3, 2
        u = leaf(rng.child(0), (length, inner))
        delta = Tensor(
            rng.child(1).uniform((length, inner), 0.1, 0.9), requires_grad=True
        )
        A = Tensor(-rng.child(2).uniform((inner, state), 0.5, 2.0), requires_grad=True)
        B = leaf(rng.child(3), (length, state))
        C = leaf(rng.child(4), (length, state))
        D = leaf(rng.child(5), (inner,))
        weights = rng.child(6).normal((length, inner))

        report = check_gradients(
            lambda *ts: weighted_sum(scan(*ts), weights),
            [u, delta, A, B, C, D],
            rtol=1e-5,
        )
        assert report.checked > 50
        assert report.passed(), report.failures


class TestCompositeGradients:
    """Whole blocks and losses."""

    def test_mamba_block(self):
        rng = Rng(31)
        params = MambaBlockParams.init(
            2, rng.child(0), state_size=2, conv_width=2, zero_out=False
        )
        tokens = leaf(rng.child(1), (5, 2))
        weights = rng.child(2).normal((5, 2))

        named = dict(params.named())
        names = list(named)

        def fn(t, *values):
            block = MambaBlockParams.from_named(dict(zip(names, values)))
            return weighted_sum(mamba_block(t, block), weights)

        report = check_gradients(
            fn,
            [tokens, *named.values()],
            rtol=1e-5,
            sample=120,
            rng=rng.child(3),
        )
        assert report.passed(min_fraction=0.95), report.failures

    def test_cross_entropy_with_smoothing(self):
        logits = leaf(Rng(41), (4,))
        report = check_gradients(
            lambda z: cross_entropy(z, 1, smoothing=0.1), [logits], rtol=1e-5
        )
        assert report.passed(), report.failures

    @pytest.mark.parametrize("censor", [0, 1])
    def test_survival_nll(self, censor):
        logits = leaf(Rng(42), (4,))
        record = SurvivalRecord(t=3, c=censor)
        report = check_gradients(
            lambda z: survival_nll(z, record), [logits], rtol=1e-5
        )
        assert report.passed(), report.failures


class TestPipelineGradients:
    """Serialization, expansion, fusion and the full network."""

    def test_expand_on_serialized_regions(self):
        rng = Rng(61)
        image = leaf(rng.child(0), (8, 8, 2))
        cls_init = leaf(rng.child(1), (2,))
        grid_weights = rng.child(2).normal((4, 4, 2, 4))
        cls_weights = rng.child(3).normal((4, 4))
        spec = ExpansionSpec.parse("h:cat")

        def fn(img, cls):
            seq = serialize(img, ScanWindow(4, 4), cls)
            total = None
            for i, region in enumerate(seq.regions):
                out = expand(region, spec)
                term = ops.add(
                    weighted_sum(out.grid, grid_weights[i]),
                    weighted_sum(out.cls, cls_weights[i]),
                )
                total = term if total is None else ops.add(total, term)
            return total

        report = check_gradients(fn, [image, cls_init], rtol=1e-5)
        assert report.checked + report.skipped == 8 * 8 * 2 + 2
        assert report.passed(), report.failures

    def test_fuse_one_pair(self):
        """CLS directions are far apart, so small steps keep the same pair."""
        rng = Rng(62)
        image = leaf(rng.child(0), (8, 8, 2))
        cls_rows = Tensor(
            np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1], [-1.0, 0.2]]),
            requires_grad=True,
        )
        grid_weights = rng.child(1).normal((3, 4, 2, 4))
        cls_weights = rng.child(2).normal((3, 4))
        spec = ExpansionSpec.parse("h:cat")

        def fused(img, rows):
            seq = serialize(img, ScanWindow(4, 4), ops.zeros((2,)))
            regions = [
                expand(replace(region, cls=rows[i]), spec)
                for i, region in enumerate(seq.regions)
            ]
            return fuse_topk(regions, 1)

        _, pairs, _ = fused(image, cls_rows)
        assert pairs == [(0, 2)]

        def fn(img, rows):
            kept, _, _ = fused(img, rows)
            total = None
            for i, region in enumerate(kept):
                term = ops.add(
                    weighted_sum(region.grid, grid_weights[i]),
                    weighted_sum(region.cls, cls_weights[i]),
                )
                total = term if total is None else ops.add(total, term)
            return total

        report = check_gradients(fn, [image, cls_rows], rtol=1e-5)
        assert report.checked + report.skipped == 8 * 8 * 2 + 4 * 2
        assert report.passed(), report.failures

    def test_tiny_network_end_to_end(self, tiny_config, small_image):
        rng = Rng(63)
        model = build(tiny_config, rng.child(0), zero_out=False)
        names = list(model.params)
        weights = rng.child(1).normal((tiny_config.final_channels,))

        def fn(*values):
            perturbed = model.with_params(dict(zip(names, values)))
            return weighted_sum(forward(perturbed, small_image).vector, weights)

        report = check_gradients(
            fn,
            [model.params[name] for name in names],
            rtol=1e-4,
            sample=50,
            rng=rng.child(2),
        )
        assert report.checked + report.skipped == 50
        assert report.passed(min_fraction=0.95), report.failures


class TestReport:
    """Test the report helpers."""

    def test_relative_error(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1.0, 0.5) == pytest.approx(0.5)

    def test_detects_wrong_gradient(self):
        """A function whose tape gradient is wrong should fail the check."""
        x = Tensor([1.0, 2.0], requires_grad=True)

        def fn(t):
            # detach drops the path through t * t
            return ops.sum(ops.add(ops.mul(t, 1.0), ops.mul(t.detach(), t.detach())))

        report = check_gradients(fn, [x])
        assert not report.passed()
        assert report.max_rel_err > 0.5

    def test_sampling_limits_coordinates(self):
        x = leaf(Rng(50), (10, 10))
        report = check_gradients(
            lambda t: ops.sum(ops.mul(t, t)), [x], sample=7, rng=Rng(1)
        )
        assert report.checked + report.skipped == 7
        assert np.isfinite(report.max_rel_err)
