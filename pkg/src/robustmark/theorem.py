"""Empirical verification of robustness preservation under Stage-2 deviation.

The robustness radius of an image is the smallest RMSE magnitude, over a set
of sampled unit directions, at which any decoded bit flips. If the Stage-1
image has radius alpha and the Stage-2 image deviates from it by delta (RMSE),
the Stage-2 image must keep an empirical radius of at least alpha - delta;
the triangle inequality guarantees it whenever the measurement is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .metrics import bit_accuracy, clamp_image, rmse, round_message
from .models import ModelBundle, decode
from .seeding import derive_seed, generator


@dataclass
class TheoremReport:
    alpha: float            # robustness radius of the Stage-1 image
    delta: float            # RMSE(stage-2 image, stage-1 image)
    eta2_bound: float       # measured radius of the Stage-2 image
    samples: int
    holds: bool | None      # None when alpha == 0 (undefined)
    tolerance: float = 1e-4


def _unit_directions(shape, n_directions: int, seed: int) -> torch.Tensor:
    """Directions with unit RMSE norm, fixed by seed so repeated radius
    measurements probe identical perturbations."""
    g = generator(derive_seed(seed, "radius_directions"))
    u = torch.randn((n_directions, *shape), generator=g)
    norms = (u.reshape(n_directions, -1) ** 2).mean(dim=1).sqrt()
    return u / norms.reshape(-1, *([1] * len(shape)))


def robustness_radius(bundle: ModelBundle, x: torch.Tensor,
                      n_directions: int = 32, seed: int = 0,
                      t_max: float = 0.2, n_bisect: int = 20,
                      clamp: bool = False) -> float:
    """Minimum over sampled unit-RMSE directions of the flip radius,
    found by bisection up to t_max.

    Perturbed probes are unclamped by default: the radius certificate is a
    statement about the decoder map itself, and clamping would make large
    probe magnitudes degenerate.
    """
    with torch.no_grad():
        bits_ref = round_message(decode(bundle, x))
    dirs = _unit_directions(x.shape, n_directions, seed)

    def flips(t: float, u: torch.Tensor) -> bool:
        probe = x + t * u
        if clamp:
            probe = clamp_image(probe)
        with torch.no_grad():
            bits = round_message(decode(bundle, probe))
        return bit_accuracy(bits, bits_ref) < 1.0

    radius = t_max
    for u in dirs:
        if not flips(t_max, u):
            continue  # no flip within t_max along this direction
        lo, hi = 0.0, t_max
        for _ in range(n_bisect):
            mid = (lo + hi) / 2
            if flips(mid, u):
                hi = mid
            else:
                lo = mid
        radius = min(radius, lo)
        if radius <= 0:
            break
    return radius


def verify_theorem(bundle: ModelBundle, x_o: torch.Tensor, m: torch.Tensor,
                   x_w1: torch.Tensor, x_w2: torch.Tensor,
                   samples: int = 32, seed: int = 0,
                   tolerance: float = 1e-4) -> TheoremReport:
    """Measure alpha on x_w1 and the radius of x_w2 with the same direction
    set, and check eta2_bound >= alpha - delta within tolerance."""
    alpha = robustness_radius(bundle, x_w1, n_directions=samples, seed=seed)
    delta = rmse(x_w2, x_w1)
    eta2 = robustness_radius(bundle, x_w2, n_directions=samples, seed=seed)
    if alpha <= 0.0:
        holds = None
    else:
        holds = eta2 >= alpha - delta - tolerance
    return TheoremReport(alpha=alpha, delta=delta, eta2_bound=eta2,
                         samples=samples, holds=holds, tolerance=tolerance)


def sampled_invariance_rate(bundle: ModelBundle, x_w2: torch.Tensor,
                            radius: float, n_samples: int = 100,
                            seed: int = 0) -> float:
    """Fraction of random perturbations of RMSE <= radius that leave the
    decoded bits of x_w2 unchanged (direct restatement of the guarantee)."""
    if radius <= 0:
        return 1.0
    with torch.no_grad():
        bits_ref = round_message(decode(bundle, x_w2))
    g = generator(derive_seed(seed, "invariance_samples"))
    ok = 0
    for _ in range(n_samples):
        u = torch.randn(x_w2.shape, generator=g)
        u = u / math.sqrt((u**2).mean().item())
        t = torch.rand((), generator=g).item() * radius
        with torch.no_grad():
            bits = round_message(decode(bundle, x_w2 + t * u))
        if bit_accuracy(bits, bits_ref) == 1.0:
            ok += 1
    return ok / n_samples
