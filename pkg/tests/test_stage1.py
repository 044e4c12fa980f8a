"""Stage-1 adversarial fine-tuning loop and its baselines."""

import copy

import pytest
import torch

from robustmark.adversarial import AdvBudget
from robustmark.errors import ConfigError, TrainingError
from robustmark.models import clean_metrics, init_models
from robustmark.stage1 import (JatConfig, Stage1Config, loss_stage1,
                               run_stage1, train_eat_baseline,
                               train_jat_baseline)


class TestConfig:
    def test_defaults(self):
        cfg = Stage1Config()
        assert cfg.iter_e == 10
        assert cfg.alpha_e == pytest.approx(5e-4)
        assert cfg.alpha_d == pytest.approx(5e-4)
        assert cfg.tau1 == pytest.approx(0.95)

    def test_validation(self):
        with pytest.raises(ConfigError):
            Stage1Config(iter_e=0)
        with pytest.raises(ConfigError):
            Stage1Config(tau1=0.4)
        with pytest.raises(ConfigError):
            Stage1Config(alpha_e=-1.0)


class TestLoss:
    def test_components_present_and_nonnegative(self, bundle0, small_corpus):
        g = torch.Generator().manual_seed(12)
        m = torch.randint(0, 2, (len(small_corpus), bundle0.meta.n),
                          generator=g).float()
        total, comps, x_a1 = loss_stage1(bundle0, small_corpus, m, AdvBudget(steps=2))
        assert set(comps) == {"L_a1", "L_w1", "L_i1"}
        for v in comps.values():
            assert v.item() >= 0.0
        expected = comps["L_a1"] + 1.0 * comps["L_w1"] + 3.0 * comps["L_i1"]
        assert total.item() == pytest.approx(expected.item(), rel=1e-6)
        assert x_a1.shape == small_corpus.shape

    def test_adversarial_example_within_budget(self, bundle0, small_corpus):
        g = torch.Generator().manual_seed(13)
        m = torch.randint(0, 2, (len(small_corpus), bundle0.meta.n),
                          generator=g).float()
        budget = AdvBudget(steps=3)
        from robustmark.models import encode
        x_w1 = encode(bundle0, small_corpus, m)
        _, _, x_a1 = loss_stage1(bundle0, small_corpus, m, budget)
        assert (x_a1 - x_w1).abs().max() <= budget.r + 1e-5


class TestLoop:
    def test_input_bundle_untouched(self, bundle0, small_corpus):
        before = {k: v.clone() for k, v in bundle0.encoder.state_dict().items()}
        run_stage1(bundle0, small_corpus,
                   Stage1Config(epochs=1, iter_e=1, attack_steps=2, batch_size=6))
        for k, v in bundle0.encoder.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_empty_corpus(self, bundle0):
        with pytest.raises(TrainingError):
            run_stage1(bundle0, torch.zeros(0, 3, 64, 64), Stage1Config(epochs=1))

    def test_history_recorded(self, bundle1):
        h = bundle1.history
        assert h["stage1_batches"] > 0
        assert len(h["stage1_epoch_adv_ba"]) > 0

    def test_eat_decoder_bit_identical(self, bundle0, small_corpus):
        out = train_eat_baseline(
            bundle0, small_corpus,
            Stage1Config(epochs=1, iter_e=2, attack_steps=2, batch_size=6))
        for k, v in bundle0.decoder.state_dict().items():
            assert torch.equal(v, out.decoder.state_dict()[k]), k
        changed = any(
            not torch.equal(v, out.encoder.state_dict()[k])
            for k, v in bundle0.encoder.state_dict().items())
        assert changed


class TestJat:
    def test_runs_and_preserves_clean(self, bundle0, small_corpus):
        out = train_jat_baseline(bundle0, small_corpus,
                                 cfg=JatConfig(epochs=1, batch_size=6,
                                               attack_steps=2))
        ba, _ = clean_metrics(out, small_corpus, seed=2)
        assert ba >= 0.9
