"""White-box and black-box evasion attacks on the watermark decoder.

White-box: PGD toward a random target message, and the defender-tailored
variant that drives bit agreement toward coin flip using the known
ground-truth message. Black-box: a query-only boundary walk that always
maintains evasion, and a transfer attack through a watermarked-vs-clean
surrogate classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AttackInfeasibleError, ParameterError, TrainingError
from .metrics import bit_accuracy, clamp_image
from .models import ModelBundle, decode
from .seeding import derive_seed, generator


@dataclass
class AdvBudget:
    r: float = 20.0 / 255.0
    steps: int = 10
    step_size: float | None = None  # defaults to r / 5
    init: str = "zero"  # "zero" or "random_in_ball"

    def __post_init__(self):
        if self.r <= 0:
            raise ParameterError("L-infinity radius must be positive")
        if self.steps < 0:
            raise ParameterError("steps must be >= 0")
        if self.step_size is None:
            self.step_size = self.r / 5.0
        if self.init not in ("zero", "random_in_ball"):
            raise ParameterError(f"unknown init {self.init!r}")


def _init_delta(x: torch.Tensor, budget: AdvBudget, g: torch.Generator) -> torch.Tensor:
    if budget.init == "random_in_ball":
        return (torch.rand(x.shape, generator=g, dtype=x.dtype) * 2 - 1) * budget.r
    return torch.zeros_like(x)


def _pgd(x_w: torch.Tensor, budget: AdvBudget, seed: int, objective) -> torch.Tensor:
    """Generic signed-gradient descent of `objective(x_w + delta)` with
    L-infinity projection of delta and [0,1] projection of the image."""
    g = generator(derive_seed(seed, "pgd_init"))
    delta = _init_delta(x_w, budget, g)
    x_det = x_w.detach()
    for _ in range(budget.steps):
        delta = delta.detach().requires_grad_(True)
        with torch.enable_grad():
            loss = objective(clamp_image(x_det + delta))
            loss.backward()
        with torch.no_grad():
            delta = delta - budget.step_size * delta.grad.sign()
            delta = delta.clamp(-budget.r, budget.r)
            delta = (x_det + delta).clamp(0, 1) - x_det
    return clamp_image(x_det + delta.detach())


def wevade_attack(bundle: ModelBundle, x_w: torch.Tensor, budget: AdvBudget,
                  seed: int = 0) -> torch.Tensor:
    """PGD pushing decoded logits toward a seeded random target message."""
    g = generator(derive_seed(seed, "wevade_target"))
    n = bundle.meta.n
    batch = x_w.shape[0] if x_w.dim() == 4 else 1
    m_t = torch.randint(0, 2, (batch, n), generator=g).float()
    if x_w.dim() == 3:
        m_t = m_t.squeeze(0)

    def objective(x):
        return F.mse_loss(decode(bundle, x), m_t, reduction="sum")

    return _pgd(x_w, budget, seed, objective)


def defender_attack(bundle: ModelBundle, x_w1: torch.Tensor, m: torch.Tensor,
                    budget: AdvBudget, seed: int = 0,
                    stop_tol: float = 0.1) -> torch.Tensor:
    """Defender-tailored PGD: with ground-truth m known, drive the bit-match
    MSE toward 0.5 (coin-flip accuracy). Deterministic with zero init; no
    random target is ever drawn.

    The objective has an interior optimum (bit-match MSE exactly 0.5), so a
    full signed step overshoots it and the clamp saturates the restoring
    gradient. Each step therefore backtracks along the signed gradient
    direction, keeping the per-sample fraction that brings the objective
    closest to the optimum, and freezes samples within stop_tol of it."""
    squeeze = x_w1.dim() == 3
    x_det = (x_w1.unsqueeze(0) if squeeze else x_w1).detach()
    m_b = m.unsqueeze(0) if m.dim() == 1 else m

    def per_sample_obj(x):
        y = decode(bundle, x).clamp(0.0, 1.0)
        return (0.5 - ((y - m_b) ** 2).mean(dim=-1)).abs()

    g = generator(derive_seed(seed, "pgd_init"))
    delta = _init_delta(x_det, budget, g)
    for _ in range(budget.steps):
        delta = delta.detach().requires_grad_(True)
        with torch.enable_grad():
            per = per_sample_obj(clamp_image(x_det + delta))
            per.sum().backward()
        best = per.detach()
        active = best > stop_tol
        if not active.any():
            break
        direction = delta.grad.sign()
        with torch.no_grad():
            best_delta = delta.detach()
            for frac in (1.0, 0.5, 0.25, 0.125, 0.0625):
                cand = delta.detach() - frac * budget.step_size * direction
                cand = cand.clamp(-budget.r, budget.r)
                cand = (x_det + cand).clamp(0, 1) - x_det
                obj = per_sample_obj(clamp_image(x_det + cand))
                take = (active & (obj < best)).reshape(-1, 1, 1, 1)
                best_delta = torch.where(take, cand, best_delta)
                best = torch.minimum(best, torch.where(active, obj, best))
            delta = best_delta
    out = clamp_image(x_det + delta.detach())
    return out.squeeze(0) if squeeze else out


# -- query-only boundary-walk attack (Black-Q) --------------------------------


def black_q_attack(decode_oracle, x_w: torch.Tensor, tau_prime: float = 0.75,
                   query_budget: int = 2000, seed: int = 0,
                   n_directions: int = 50, n_bisect: int = 20,
                   max_reseeds: int = 10, probe_cell: int = 4) -> tuple[torch.Tensor, int]:
    """Boundary walk with oracle access only; every intermediate and the
    returned image evades (BA against the watermarked image's decoded
    message stays below tau_prime). Returns (image, queries used).

    Gradient-direction probes are block-constant patterns (probe_cell x
    probe_cell cells) rather than per-pixel noise: estimating a boundary
    normal from ~50 oracle bits is hopeless in the full pixel space, but
    works in the reduced blockwise space when the decoder's decision
    boundary has spatially coherent structure. Decoders that concentrate
    their evidence on isolated pixels sit mostly outside this subspace and
    force the walk to stop much further from the watermarked image."""
    if not (0.5 < tau_prime < 1.0):
        raise ParameterError(f"tau_prime must be in (0.5, 1), got {tau_prime}")
    if x_w.shape[-2] % probe_cell or x_w.shape[-1] % probe_cell:
        raise ParameterError("probe_cell must divide the image height and width")
    g = generator(derive_seed(seed, "black_q"))
    queries = 0
    m_ref = decode_oracle(x_w)

    def evades(x) -> bool:
        nonlocal queries
        queries += 1
        return bit_accuracy(decode_oracle(x), m_ref) < tau_prime

    # escalating-noise start: the first evading point found this way is far
    # closer to x_w than a uniform random image, so the boundary walk spends
    # its query budget refining rather than covering distance
    x_adv = None
    sigma = 0.05
    for _ in range(max_reseeds):
        cand = clamp_image(
            x_w + sigma * torch.randn(x_w.shape, generator=g, dtype=x_w.dtype))
        if evades(cand):
            x_adv = cand
            break
        sigma *= 2.0
    if x_adv is None:
        raise AttackInfeasibleError(
            f"no evading noisy start after {max_reseeds} re-seeds"
        )

    def bisect_to_boundary(adv: torch.Tensor) -> torch.Tensor:
        # walk the segment adv -> x_w, keeping the evading side
        lo, hi = 0.0, 1.0  # fraction toward x_w
        for _ in range(n_bisect):
            if queries >= query_budget:
                break
            mid = (lo + hi) / 2
            cand = adv + mid * (x_w - adv)
            if evades(cand):
                lo = mid
            else:
                hi = mid
        return clamp_image(adv + lo * (x_w - adv))

    gh, gw = x_w.shape[-2] // probe_cell, x_w.shape[-1] // probe_cell

    def probe_direction() -> torch.Tensor:
        z = torch.randn((1, 3, gh, gw), generator=g, dtype=x_w.dtype)
        u = F.interpolate(z, scale_factor=probe_cell, mode="nearest").squeeze(0)
        return u / (u.norm() + 1e-12)

    x_adv = bisect_to_boundary(x_adv)
    step = 0
    while queries + n_directions + n_bisect + 4 <= query_budget:
        step += 1
        dist = (x_adv - x_w).norm().item()
        probe = max(dist / 10.0, 1e-4)
        phis, dirs = [], []
        for _ in range(n_directions):
            u = probe_direction()
            phis.append(1.0 if evades(clamp_image(x_adv + probe * u)) else -1.0)
            dirs.append(u)
        # baseline subtraction: when nearly all probes land on one side the
        # raw average collapses to that side's mean direction; centering
        # keeps the minority probes' information
        mean_phi = sum(phis) / len(phis)
        acc = torch.zeros_like(x_adv)
        for phi, u in zip(phis, dirs):
            acc = acc + (phi - mean_phi) * u
        if acc.norm() < 1e-12:
            break
        direction = acc / acc.norm()
        # geometric step along the evasion side, shrinking until it evades
        xi = dist / (step**0.5)
        moved = False
        for _ in range(4):
            cand = clamp_image(x_adv + xi * direction)
            if evades(cand):
                x_adv = cand
                moved = True
                break
            xi /= 2
        if not moved:
            break
        x_adv = bisect_to_boundary(x_adv)

    return x_adv, queries


# -- surrogate transfer attack (Black-S) --------------------------------------


class SurrogateNet(nn.Module):
    """Watermarked-vs-clean binary classifier (logit > 0 means watermarked)."""

    def __init__(self, width: int = 24):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.ReLU(True),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.ReLU(True),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.ReLU(True),
        )
        self.head = nn.Linear(w, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x).mean(dim=(-2, -1))).squeeze(-1)


@dataclass
class SurrogateBundle:
    net: SurrogateNet
    validation_accuracy: float = 0.0
    history: dict = field(default_factory=dict)


@dataclass
class SurrogateConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    holdout_fraction: float = 0.25
    seed: int = 0
    shuffle_labels: bool = False  # no-signal control


def train_surrogate(clean_corpus: torch.Tensor, watermarked_corpus: torch.Tensor,
                    cfg: SurrogateConfig | None = None) -> SurrogateBundle:
    """Train the detector and record held-out validation accuracy."""
    cfg = cfg or SurrogateConfig()
    if clean_corpus.numel() == 0 or watermarked_corpus.numel() == 0:
        raise TrainingError("both corpora must be nonempty")
    # detach: callers often pass encoder outputs still attached to a graph
    x = torch.cat([clean_corpus, watermarked_corpus]).detach()
    y = torch.cat([
        torch.zeros(len(clean_corpus)), torch.ones(len(watermarked_corpus))
    ])
    g = generator(derive_seed(cfg.seed, "surrogate_split"))
    if cfg.shuffle_labels:
        y = y[torch.randperm(len(y), generator=g)]
    perm = torch.randperm(len(x), generator=g)
    x, y = x[perm], y[perm]
    n_hold = max(2, int(len(x) * cfg.holdout_fraction))
    x_tr, y_tr = x[:-n_hold], y[:-n_hold]
    x_va, y_va = x[-n_hold:], y[-n_hold:]

    torch.manual_seed(derive_seed(cfg.seed, "surrogate_init"))
    net = SurrogateNet()
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    for _ in range(cfg.epochs):
        order = torch.randperm(len(x_tr), generator=g)
        for start in range(0, len(x_tr), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = F.binary_cross_entropy_with_logits(net(x_tr[idx]), y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()

    net.eval()
    with torch.no_grad():
        acc = ((net(x_va) > 0).float() == y_va).float().mean().item()
    return SurrogateBundle(net=net, validation_accuracy=acc)


def black_s_attack(surrogate: SurrogateBundle, x_w: torch.Tensor,
                   budget: AdvBudget, seed: int = 0,
                   log: list | None = None) -> torch.Tensor:
    """PGD against the surrogate pushing the image toward its 'clean' class;
    transfer success is measured by the caller against the true decoder."""

    def objective(x):
        score = surrogate.net(x.unsqueeze(0) if x.dim() == 3 else x)
        if log is not None:
            log.append(-score.sum().item())  # clean score for inspection
        return score.sum()

    return _pgd(x_w, budget, seed, objective)
