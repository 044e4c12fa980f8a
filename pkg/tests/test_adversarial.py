"""White-box PGD attacks, the defender-tailored variant, and black-box attacks."""

import pytest
import torch

from robustmark.adversarial import (AdvBudget, black_q_attack, black_s_attack,
                                    defender_attack, train_surrogate,
                                    SurrogateConfig, wevade_attack)
from robustmark.errors import ParameterError
from robustmark.metrics import bit_accuracy, psnr, round_message
from robustmark.models import decode, encode


@pytest.fixture(scope="module")
def embedded(bundle0, small_corpus):
    g = torch.Generator().manual_seed(21)
    m = torch.randint(0, 2, (len(small_corpus), bundle0.meta.n),
                      generator=g).float()
    x_w = encode(bundle0, small_corpus, m)
    return x_w, m


class TestWevade:
    def test_linf_budget_respected(self, bundle0, embedded):
        x_w, _ = embedded
        budget = AdvBudget()
        x_a = wevade_attack(bundle0, x_w, budget, seed=3)
        assert (x_a - x_w).abs().max() <= budget.r + 1e-6
        assert x_a.min() >= 0.0 and x_a.max() <= 1.0

    def test_deterministic(self, bundle0, embedded):
        x_w, _ = embedded
        a = wevade_attack(bundle0, x_w, AdvBudget(steps=5), seed=3)
        b = wevade_attack(bundle0, x_w, AdvBudget(steps=5), seed=3)
        assert torch.equal(a, b)
        c = wevade_attack(bundle0, x_w, AdvBudget(steps=5), seed=4)
        assert not torch.equal(a, c)

    def test_zero_steps_is_identity(self, bundle0, embedded):
        x_w, _ = embedded
        x_a = wevade_attack(bundle0, x_w, AdvBudget(steps=0), seed=0)
        # zero-init PGD with no steps leaves the image unchanged
        assert torch.equal(x_a, x_w)

    def test_degrades_stage0_accuracy(self, bundle0, embedded):
        x_w, m = embedded
        x_a = wevade_attack(bundle0, x_w, AdvBudget(steps=50), seed=7)
        ba = bit_accuracy(round_message(decode(bundle0, x_a)), m)
        clean = bit_accuracy(round_message(decode(bundle0, x_w)), m)
        assert ba < clean


class TestDefenderAttack:
    def test_budget_and_determinism(self, bundle0, embedded):
        x_w, m = embedded
        budget = AdvBudget()
        a = defender_attack(bundle0, x_w, m, budget)
        b = defender_attack(bundle0, x_w, m, budget)
        assert torch.equal(a, b)  # zero-init: no randomness at all
        assert (a - x_w).abs().max() <= budget.r + 1e-6

    def test_objective_decreases(self, bundle0, embedded):
        x_w, m = embedded
        x_a = defender_attack(bundle0, x_w, m, AdvBudget())
        with torch.no_grad():
            y0 = decode(bundle0, x_w).clamp(0, 1)
            y1 = decode(bundle0, x_a).clamp(0, 1)
        obj = lambda y: (0.5 - ((y - m) ** 2).mean(dim=-1)).abs()
        assert obj(y1).mean() < obj(y0).mean()


class TestBlackQ:
    def test_constructive_invariant_and_queries(self, bundle0, embedded, cfg):
        x_w, m = embedded
        acfg = cfg["attacks"]

        def oracle(img):
            with torch.no_grad():
                return round_message(decode(bundle0, img))

        for i in range(2):
            out, queries = black_q_attack(
                oracle, x_w[i], tau_prime=acfg["black_q_tau"],
                query_budget=int(acfg["black_q_budget"]), seed=i)
            ba = bit_accuracy(oracle(out), oracle(x_w[i]))
            assert ba < acfg["black_q_tau"]
            assert 0 < queries <= int(acfg["black_q_budget"])
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_tau_validation(self, bundle0, embedded):
        x_w, _ = embedded
        with pytest.raises(ParameterError):
            black_q_attack(lambda x: x, x_w[0], tau_prime=0.4)


class TestBlackS:
    def test_surrogate_transfer_runs(self, bundle0, corpus, embedded):
        x_w, m = embedded
        surrogate = train_surrogate(corpus[:16], encode(
            bundle0, corpus[:16],
            torch.randint(0, 2, (16, bundle0.meta.n),
                          generator=torch.Generator().manual_seed(5)).float()),
            SurrogateConfig(epochs=8, seed=5))
        x_a = black_s_attack(surrogate, x_w, AdvBudget(steps=10), seed=1)
        assert x_a.shape == x_w.shape
        assert (x_a - x_w).abs().max() <= AdvBudget().r + 1e-6
