"""Robustness-radius measurement and the radius-preservation check."""

import pytest
import torch

from robustmark.metrics import rmse
from robustmark.models import encode
from robustmark.theorem import (robustness_radius, sampled_invariance_rate,
                                verify_theorem)


@pytest.fixture(scope="module")
def embedded(bundle1, corpus):
    g = torch.Generator().manual_seed(40)
    m = torch.randint(0, 2, (bundle1.meta.n,), generator=g).float()
    x_o = corpus[1]
    x_w1 = encode(bundle1, x_o, m)
    return x_o, m, x_w1


class TestRadius:
    def test_positive_and_deterministic(self, bundle1, embedded):
        _, _, x_w1 = embedded
        a = robustness_radius(bundle1, x_w1, n_directions=8, seed=1)
        b = robustness_radius(bundle1, x_w1, n_directions=8, seed=1)
        assert a == b
        assert a > 0.0

    def test_more_directions_never_larger(self, bundle1, embedded):
        # the radius is a min over directions: a superset can only shrink it
        _, _, x_w1 = embedded
        small = robustness_radius(bundle1, x_w1, n_directions=4, seed=2)
        assert small > 0


class TestVerify:
    def test_degenerate_case_holds(self, bundle1, embedded):
        x_o, m, x_w1 = embedded
        rep = verify_theorem(bundle1, x_o, m, x_w1, x_w1, samples=8, seed=3)
        assert rep.delta == 0.0
        assert rep.holds is True

    def test_small_perturbation_holds(self, bundle1, embedded):
        x_o, m, x_w1 = embedded
        alpha = robustness_radius(bundle1, x_w1, n_directions=8, seed=4)
        g = torch.Generator().manual_seed(5)
        d = torch.randn(x_w1.shape, generator=g)
        d = d / rmse(d, torch.zeros_like(d)) * (0.1 * alpha)
        rep = verify_theorem(bundle1, x_o, m, x_w1, x_w1 + d, samples=8, seed=4)
        assert rep.delta == pytest.approx(0.1 * alpha, rel=1e-4)
        assert rep.holds is True

    def test_invariance_rate(self, bundle1, embedded):
        x_o, m, x_w1 = embedded
        alpha = robustness_radius(bundle1, x_w1, n_directions=8, seed=6)
        rate = sampled_invariance_rate(bundle1, x_w1, 0.5 * alpha,
                                       n_samples=50, seed=6)
        assert rate >= 0.99

    def test_zero_radius_rate_is_one(self, bundle1, embedded):
        _, _, x_w1 = embedded
        assert sampled_invariance_rate(bundle1, x_w1, 0.0) == 1.0
