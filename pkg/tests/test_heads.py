"""Tests for classification and survival heads."""

import numpy as np
import pytest

from pixel_mamba.core.rng import Rng
from pixel_mamba.core.tensor import Tensor
from pixel_mamba.heads import HazardOutput
from pixel_mamba.heads import HeadError
from pixel_mamba.heads import HeadParams
from pixel_mamba.heads import RecordError
from pixel_mamba.heads import SurvivalRecord
from pixel_mamba.heads import classify_head
from pixel_mamba.heads import cross_entropy
from pixel_mamba.heads import hazard_to_survival
from pixel_mamba.heads import risk_score
from pixel_mamba.heads import survival_batch_nll
from pixel_mamba.heads import survival_nll

from .conftest import assert_close


LOGIT_HALF = 0.0  # sigmoid(0) = 0.5


class TestCrossEntropy:
    """Test the classification loss."""

    def test_uniform_logits(self):
        assert cross_entropy(Tensor([0.3] * 4), 1).item() == pytest.approx(np.log(4))

    def test_saturated_true_class(self):
        assert cross_entropy(Tensor([0.0, 1e6, 0.0]), 1).item() == pytest.approx(0.0)

    def test_hand_value(self):
        loss = cross_entropy(Tensor([1.0, 2.0, 3.0]), 2).item()
        assert loss == pytest.approx(0.40761, abs=1e-5)

    def test_smoothing_raises_confident_loss(self):
        logits = Tensor([0.0, 8.0, 0.0])
        plain = cross_entropy(logits, 1).item()
        smoothed = cross_entropy(logits, 1, smoothing=0.1).item()
        assert smoothed > plain

    def test_label_range(self):
        with pytest.raises(RecordError):
            cross_entropy(Tensor([0.0, 1.0]), 2)


class TestHazards:
    """Test the hazard to survival transform."""

    def test_two_halves(self):
        out = hazard_to_survival(Tensor([0.5, 0.5]))
        assert_close(out, [0.5, 0.25])

    def test_tiny_hazards(self):
        out = hazard_to_survival(Tensor([1e-9, 1e-9, 1e-9]))
        assert np.all(out.numpy() > 1.0 - 1e-8)

    def test_certain_event(self):
        out = hazard_to_survival(Tensor([1.0 - 1e-12, 0.5]))
        assert np.all(out.numpy() < 1e-11)

    def test_monotone(self):
        h = Tensor(Rng(1).uniform((10,), 0.01, 0.99))
        s = hazard_to_survival(h).numpy()
        assert np.all(np.diff(s) <= 0)

    def test_rejects_boundary(self):
        with pytest.raises(HeadError):
            hazard_to_survival(Tensor([0.0, 0.5]))

    def test_hazard_output_views(self):
        out = HazardOutput(Tensor([LOGIT_HALF, LOGIT_HALF]))
        assert_close(out.hazards, [0.5, 0.5])
        assert_close(out.survival, [0.5, 0.25])
        assert out.risk == pytest.approx(1.0)


class TestSurvivalNll:
    """Test the discrete-time likelihood."""

    def test_event(self):
        """Event in bin 2 with h = [0.5, 0.5]: -log 0.5 - log 0.5."""
        logits = Tensor([LOGIT_HALF, LOGIT_HALF])
        loss = survival_nll(logits, SurvivalRecord(t=2, c=0)).item()
        assert loss == pytest.approx(1.38629, abs=1e-5)

    def test_censored(self):
        """Censored after bin 2: -log S(2) = -log 0.25."""
        logits = Tensor([LOGIT_HALF, LOGIT_HALF])
        loss = survival_nll(logits, SurvivalRecord(t=2, c=1)).item()
        assert loss == pytest.approx(np.log(4.0))

    def test_censored_with_vanishing_hazard(self):
        loss = survival_nll(Tensor([-40.0, -40.0, -40.0]), SurvivalRecord(t=3, c=1))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_matches_survival_curve(self):
        """Agrees with -log h(t) - log S(t-1) computed from the curve."""
        logits = Tensor(Rng(2).normal((5,)))
        h = 1.0 / (1.0 + np.exp(-logits.numpy()))
        s = np.cumprod(1.0 - h)
        loss = survival_nll(logits, SurvivalRecord(t=4, c=0)).item()
        assert loss == pytest.approx(-np.log(h[3]) - np.log(s[2]))

    def test_bin_out_of_range(self):
        with pytest.raises(RecordError):
            survival_nll(Tensor([0.0, 0.0]), SurvivalRecord(t=3, c=0))

    def test_batch_sums(self):
        logits = [Tensor([0.0, 0.0]), Tensor([1.0, -1.0])]
        records = [SurvivalRecord(2, 0), SurvivalRecord(1, 1)]
        total = survival_batch_nll(logits, records).item()
        parts = sum(survival_nll(z, r).item() for z, r in zip(logits, records))
        assert total == pytest.approx(parts)

    def test_batch_length_mismatch(self):
        with pytest.raises(RecordError):
            survival_batch_nll([Tensor([0.0])], [])


class TestRecords:
    """Test survival record validation."""

    def test_event_flag(self):
        assert SurvivalRecord(t=1, c=0).event == 1
        assert SurvivalRecord(t=1, c=1).event == 0

    @pytest.mark.parametrize("t,c", [(0, 0), (2, 2), (-1, 1)])
    def test_invalid(self, t, c):
        with pytest.raises(RecordError):
            SurvivalRecord(t=t, c=c)


class TestHeadParams:
    """Test the linear head."""

    def test_init_and_names(self):
        head = HeadParams.init(8, 3, Rng(0))
        assert head.outputs == 3
        assert [name for name, _ in head.named()] == ["head.weight", "head.bias"]
        assert_close(head.bias, np.zeros(3))

    def test_classify_head(self):
        weight = Tensor(np.eye(2))
        bias = Tensor([1.0, -1.0])
        assert_close(classify_head(Tensor([2.0, 3.0]), weight, bias), [3.0, 2.0])

    def test_risk_orders_by_hazard(self):
        assert risk_score(Tensor([2.0, 2.0])) > risk_score(Tensor([-2.0, -2.0]))
