"""Stage-2 per-image quality-constrained optimization."""

import pytest
import torch

from robustmark.distortions import AttackSpec
from robustmark.errors import ConfigError, ParameterError
from robustmark.metrics import bit_accuracy, psnr, round_message
from robustmark.models import decode, encode
from robustmark.stage2 import (Stage2Config, loss_stage2, optimize_image,
                               pgd_step_quality)


@pytest.fixture(scope="module")
def one_image(bundle1, corpus):
    g = torch.Generator().manual_seed(30)
    m = torch.randint(0, 2, (bundle1.meta.n,), generator=g).float()
    x_o = corpus[0]
    x_w1 = encode(bundle1, x_o, m)
    return x_o, m, x_w1


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            Stage2Config(psnr_floor=0.0)
        with pytest.raises(ConfigError):
            Stage2Config(tau2=0.3)
        with pytest.raises(ConfigError):
            Stage2Config(iter_o=0)


class TestLoss:
    def test_weight_normalized_components(self, bundle1, one_image):
        x_o, m, x_w1 = one_image
        attacks = [AttackSpec("jpeg", {"Q": 50}, weight=1.0),
                   AttackSpec("gaussian_noise", {"sigma": 0.1}, weight=0.1)]
        total, comps = loss_stage2(bundle1, x_w1, x_w1, x_o, m, attacks)
        assert set(comps) == {"L_a2", "L_w2", "L_i2"}
        expected = comps["L_a2"] + 0.1 * comps["L_w2"] + 5.0 * comps["L_i2"]
        assert total.item() == pytest.approx(expected.item(), rel=1e-6)

    def test_rejects_nondifferentiable_attack(self, bundle1, one_image):
        x_o, m, x_w1 = one_image
        with pytest.raises(ParameterError):
            loss_stage2(bundle1, x_w1, x_w1, x_o, m,
                        [AttackSpec("crop", {}, differentiable=False)])

    def test_degenerate_anchor_term(self, bundle1, one_image):
        # at x_w2 == x_w1 the anchor MSE inside L_i2 is exactly zero
        x_o, m, x_w1 = one_image
        _, comps = loss_stage2(bundle1, x_w1, x_w1, x_o, m, [])
        mse_o = torch.nn.functional.mse_loss(x_w1, x_o)
        from robustmark.metrics import perceptual_distance
        expected = (mse_o + perceptual_distance(x_w1, x_o, 1337)) / 4.0
        assert comps["L_i2"].item() == pytest.approx(expected.item(), rel=1e-5)


class TestQualityStep:
    def test_acceptance_rule(self, one_image):
        x_o, _, x_w1 = one_image
        grad = torch.ones_like(x_w1)
        stepped, ok = pgd_step_quality(x_w1, grad, x_o, alpha_x=1e-4,
                                       psnr_floor=34.0)
        assert ok and psnr(stepped, x_o) >= 34.0
        # a huge step must be rejected and the iterate returned unchanged
        same, ok2 = pgd_step_quality(x_w1, grad, x_o, alpha_x=0.5,
                                     psnr_floor=34.0)
        assert not ok2 and torch.equal(same, x_w1)

    def test_gradient_shape_checked(self, one_image):
        x_o, _, x_w1 = one_image
        with pytest.raises(ParameterError):
            pgd_step_quality(x_w1, torch.ones(3, 8, 8), x_o, 1e-3, 34.0)


class TestOptimizeImage:
    def test_floor_and_clean_accuracy(self, bundle1, one_image, stage2_cfg,
                                      denoiser_a):
        x_o, m, x_w1 = one_image
        x_w2 = optimize_image(bundle1, x_o, m, x_w1, stage2_cfg,
                              denoiser=denoiser_a)
        assert psnr(x_w2, x_o) >= stage2_cfg.psnr_floor
        ba = bit_accuracy(round_message(decode(bundle1, x_w2)), m)
        assert ba == 1.0

    def test_parameters_unchanged(self, bundle1, one_image, stage2_cfg,
                                  denoiser_a):
        x_o, m, x_w1 = one_image
        before = {k: v.clone() for k, v in bundle1.parameter_arrays().items()}
        optimize_image(bundle1, x_o, m, x_w1, stage2_cfg, denoiser=denoiser_a)
        after = bundle1.parameter_arrays()
        for k in before:
            assert torch.equal(before[k], after[k]), k

    def test_deterministic(self, bundle1, one_image, stage2_cfg, denoiser_a):
        x_o, m, x_w1 = one_image
        a = optimize_image(bundle1, x_o, m, x_w1, stage2_cfg, denoiser=denoiser_a)
        b = optimize_image(bundle1, x_o, m, x_w1, stage2_cfg, denoiser=denoiser_a)
        assert torch.equal(a, b)

    def test_iterate_log_monotone_psnr_floor(self, bundle1, one_image,
                                             stage2_cfg, denoiser_a):
        x_o, m, x_w1 = one_image
        log: list = []
        optimize_image(bundle1, x_o, m, x_w1, stage2_cfg, denoiser=denoiser_a,
                       iterate_log=log)
        assert log, "iterate log should record accepted steps"
        for it in log:
            assert psnr(it, x_o) >= stage2_cfg.psnr_floor
