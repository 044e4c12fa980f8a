"""Stage 2: per-image direct optimization against distortion and regeneration
attacks, with a constrained image loss and a quality-aware PGD step.

The signed-gradient step replaces the usual epsilon-ball projection with a
PSNR acceptance rule: a candidate iterate is kept only if its PSNR to the
cover stays at or above the floor p; the first rejection stops the
optimization and the last accepted iterate is returned. Model parameters are
never touched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .distortions import AttackSpec, apply_distortion, jpeg_approx
from .errors import ConfigError, ParameterError
from .metrics import (bit_accuracy, clamp_image, perceptual_distance, psnr,
                      round_message)
from .models import ModelBundle, decode, encode
from .seeding import derive_seed


@dataclass
class Stage2Config:
    iter_o: int = 40
    alpha_x: float = 1e-3
    psnr_floor: float = 34.0
    lambda_w2: float = 0.1
    lambda_i2: float = 5.0
    tau2: float = 0.95
    attacks: list[AttackSpec] = field(default_factory=list)
    perceptual_seed: int = 1337
    seed: int = 0

    def __post_init__(self):
        if self.psnr_floor <= 0:
            raise ConfigError("psnr_floor must be positive")
        if not (0.5 < self.tau2 <= 1.0):
            raise ConfigError(f"tau2 must be in (0.5, 1], got {self.tau2}")
        if self.iter_o <= 0 or self.alpha_x <= 0:
            raise ConfigError("iter_o and alpha_x must be positive")


def loss_stage2(bundle: ModelBundle, x_w2: torch.Tensor, x_w1: torch.Tensor,
                x_o: torch.Tensor, m: torch.Tensor,
                active_attacks: list[AttackSpec], seed: int = 0,
                lambda_w2: float = 0.1, lambda_i2: float = 5.0,
                perceptual_seed: int = 1337, denoiser=None):
    """Combined Stage-2 loss and its components.

    The attack term is the weight-normalized mean of the decoded-message MSE
    over the active (differentiable) attacks; the image term balances
    deviation from the cover against deviation from the Stage-1 encoded
    image, which preserves the robustness radius gained in Stage 1.
    """
    components: dict[str, torch.Tensor] = {}
    if active_attacks:
        total_w = sum(a.weight for a in active_attacks)
        if total_w <= 0:
            raise ParameterError("active attack weights sum to zero")
        l_a2 = x_w2.new_zeros(())
        for i, spec in enumerate(active_attacks):
            if not spec.differentiable:
                raise ParameterError(
                    f"non-differentiable attack {spec.kind!r} inside optimization")
            if spec.kind == "jpeg":
                # optimize through a smooth quantizer so the gradient sees
                # which coefficients survive compression; evaluation always
                # uses the real (straight-through) codec
                x_ak = jpeg_approx(x_w2, spec.params["Q"], rounding="soft")
            else:
                x_ak = apply_distortion(x_w2, spec,
                                        seed=derive_seed(seed, f"s2_attack_{i}"),
                                        denoiser=denoiser)
            l_a2 = l_a2 + spec.weight * F.mse_loss(decode(bundle, x_ak), m)
        l_a2 = l_a2 / total_w
    else:
        l_a2 = x_w2.new_zeros(())
    components["L_a2"] = l_a2

    l_w2 = F.mse_loss(decode(bundle, x_w2), m)
    l_i2 = (F.mse_loss(x_w2, x_o)
            + perceptual_distance(x_w2, x_o, perceptual_seed)
            + 2.0 * F.mse_loss(x_w2, x_w1)) / 4.0
    components["L_w2"] = l_w2
    components["L_i2"] = l_i2
    total = l_a2 + lambda_w2 * l_w2 + lambda_i2 * l_i2
    return total, components


def pgd_step_quality(x_w2: torch.Tensor, grad: torch.Tensor, x_o: torch.Tensor,
                     alpha_x: float, psnr_floor: float
                     ) -> tuple[torch.Tensor, bool]:
    """Signed-gradient step with PSNR acceptance: keep the candidate only if
    psnr(candidate, x_o) >= psnr_floor, else return the input unchanged."""
    if grad.shape != x_w2.shape:
        raise ParameterError("gradient shape must match image shape")
    candidate = clamp_image(x_w2 - alpha_x * grad.sign())
    if psnr(candidate, x_o) >= psnr_floor:
        return candidate, True
    return x_w2, False


def optimize_image(bundle: ModelBundle, x_o: torch.Tensor, m: torch.Tensor,
                   x_w1: torch.Tensor | None = None,
                   cfg: Stage2Config | None = None, denoiser=None,
                   iterate_log: list | None = None) -> torch.Tensor:
    """Quality-constrained robustness optimization of one encoded image.

    Per iteration: evaluate bit accuracy under each attack, drop attacks
    already at or above tau2 for this iteration, take one quality-aware step
    on the remaining loss, and stop on the first rejected step. The result
    always satisfies the PSNR floor (or is x_w1 unchanged when x_w1 itself
    violates it, with a warning).
    """
    cfg = cfg or Stage2Config()
    if x_w1 is None:
        with torch.no_grad():
            x_w1 = encode(bundle, x_o, m)
    x_w1 = x_w1.detach()

    params_before = {k: v.clone() for k, v in bundle.parameter_arrays().items()}

    if psnr(x_w1, x_o) < cfg.psnr_floor:
        warnings.warn(
            "stage-1 encoded image already below the PSNR floor; returning it "
            "unchanged", RuntimeWarning)
        return x_w1

    x_w2 = x_w1.clone()
    for it in range(cfg.iter_o):
        iter_seed = derive_seed(cfg.seed, f"s2_iter_{it}")
        active = []
        with torch.no_grad():
            for i, spec in enumerate(cfg.attacks):
                x_ak = apply_distortion(x_w2, spec,
                                        seed=derive_seed(iter_seed, f"s2_attack_{i}"),
                                        denoiser=denoiser)
                ba = bit_accuracy(round_message(decode(bundle, x_ak)), m)
                if ba < cfg.tau2:
                    active.append(spec)
                if iterate_log is not None:
                    iterate_log.append({
                        "iteration": it, "attack": spec.kind, "ba": ba,
                        "psnr": psnr(x_w2, x_o), "accepted": None,
                    })

        x_req = x_w2.detach().requires_grad_(True)
        total, _ = loss_stage2(
            bundle, x_req, x_w1, x_o, m, active, seed=iter_seed,
            lambda_w2=cfg.lambda_w2, lambda_i2=cfg.lambda_i2,
            perceptual_seed=cfg.perceptual_seed, denoiser=denoiser)
        total.backward()
        candidate, accepted = pgd_step_quality(
            x_w2, x_req.grad.detach(), x_o, cfg.alpha_x, cfg.psnr_floor)
        if iterate_log is not None:
            iterate_log.append({
                "iteration": it, "attack": "step", "ba": float("nan"),
                "psnr": psnr(candidate, x_o), "accepted": accepted,
            })
        if not accepted:
            break
        x_w2 = candidate.detach()

    params_after = bundle.parameter_arrays()
    for k, v in params_before.items():
        if not torch.equal(v, params_after[k]):
            raise RuntimeError(f"model parameter {k} mutated during optimization")
    return x_w2
