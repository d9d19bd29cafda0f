"""
Tests for circle loss and the pairwise margin fallback
"""

import math

import numpy as np
import pytest
import torch

from src.analyzers.losses import circle_loss, pairwise_margin_loss
from src.core.exceptions import NumericalError


def brute_force_circle(pos, neg, gamma, w_pos, w_neg):
    total = sum(math.exp(gamma * (w_neg * sn - w_pos * sp)) for sn in neg for sp in pos)
    return math.log1p(total)


class TestCircleLoss:

    def test_matches_double_sum(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            pos = rng.uniform(-1, 1, size=int(rng.integers(1, 6)))
            neg = rng.uniform(-1, 1, size=int(rng.integers(1, 6)))
            gamma = float(rng.uniform(0.5, 8.0))
            w_pos, w_neg = rng.uniform(0.0, 2.0, size=2)
            got = float(circle_loss(pos.tolist(), neg.tolist(), gamma, w_pos, w_neg))
            assert abs(got - brute_force_circle(pos, neg, gamma, w_pos, w_neg)) <= 1e-10

    def test_each_weight_scales_its_own_side(self):
        loss = circle_loss([0.5], [0.1], gamma=4.0, weight_pos=2.0, weight_neg=3.0)
        assert float(loss) == pytest.approx(math.log1p(math.exp(4.0 * (3.0 * 0.1 - 2.0 * 0.5))), rel=1e-12)

    def test_empty_side_is_zero(self):
        assert float(circle_loss([], [0.4, 0.1])) == 0.0
        assert float(circle_loss([0.9], [])) == 0.0

    def test_equal_similarities_give_log_two(self):
        assert float(circle_loss([0.3], [0.3], gamma=7.0)) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_large_gamma_does_not_overflow(self):
        loss = float(circle_loss([-1.0], [1.0], gamma=1000.0))
        assert math.isfinite(loss)
        assert loss == pytest.approx(2000.0, rel=1e-12)

    def test_never_negative(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            loss = circle_loss(rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 4), gamma=32.0)
            assert float(loss) >= 0.0

    def test_monotone_in_similarities(self):
        base = float(circle_loss([0.5], [0.2], gamma=4.0))
        assert float(circle_loss([0.7], [0.2], gamma=4.0)) < base
        assert float(circle_loss([0.5], [0.4], gamma=4.0)) > base

    def test_gradient_flows(self):
        pos = torch.tensor([0.6, 0.2], dtype=torch.float64, requires_grad=True)
        neg = torch.tensor([0.1], dtype=torch.float64, requires_grad=True)
        circle_loss(pos, neg, gamma=2.0).backward()
        assert (pos.grad < 0).all()
        assert (neg.grad > 0).all()

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            circle_loss([float('nan')], [0.1])


class TestPairwiseMarginLoss:

    def test_perfect_pairs_cost_nothing(self):
        assert float(pairwise_margin_loss([1.0, 1.0], [0.1, -0.5], margin=0.2)) == 0.0

    def test_hand_computed(self):
        loss = float(pairwise_margin_loss([0.5], [0.6, 0.0], margin=0.2))
        assert loss == pytest.approx(0.25 + 0.16 / 2, abs=1e-15)

    def test_one_side_only(self):
        assert float(pairwise_margin_loss([0.0], [])) == pytest.approx(1.0)
        assert float(pairwise_margin_loss([], [0.7], margin=0.2)) == pytest.approx(0.25)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            pairwise_margin_loss([0.2], [float('inf')])
