"""Stage 1: adversarial encoder fine-tuning with conditional decoder update.

Per batch, the encoder takes iter_e gradient steps on the combined loss,
recomputing the defender-tailored adversarial example each step. After the
final encoder step, the decoder receives at most one gradient step, and only
if the adversarial bit accuracy fell below tau1. JAT (joint training through
sampled attacks) and EAT (frozen decoder) baselines share the same plumbing.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .adversarial import AdvBudget, defender_attack
from .distortions import AttackSpec, apply_distortion
from .errors import ConfigError, TrainingError
from .metrics import bit_accuracy, clamp_image, perceptual_distance, round_message
from .models import ModelBundle, decode, encode
from .seeding import derive_seed, generator


@dataclass
class Stage1Config:
    iter_e: int = 10
    alpha_e: float = 5e-4
    alpha_d: float = 5e-4
    r: float = 20.0 / 255.0
    lambda_w1: float = 1.0
    lambda_i1: float = 3.0
    tau1: float = 0.95
    epochs: int = 10
    batch_size: int = 16
    attack_steps: int = 10
    perceptual_seed: int = 1337
    seed: int = 0

    def __post_init__(self):
        for name in ("iter_e", "alpha_e", "alpha_d", "r", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0.5 < self.tau1 <= 1.0):
            raise ConfigError(f"tau1 must be in (0.5, 1], got {self.tau1}")

    def budget(self) -> AdvBudget:
        return AdvBudget(r=self.r, steps=self.attack_steps)


def loss_stage1(bundle: ModelBundle, x_o: torch.Tensor, m: torch.Tensor,
                budget: AdvBudget, lambda_w1: float = 1.0,
                lambda_i1: float = 3.0, perceptual_seed: int = 1337,
                attack_seed: int = 0):
    """Combined Stage-1 loss.

    Returns (total, components, x_a1) where components holds the adversarial
    term (decoded bits of the attacked image vs m), the clean term (decoded
    bits of the encoded image vs m), and the image-quality term
    (pixel MSE + perceptual distance, halved). The adversarial perturbation
    is computed fresh against the current parameters and treated as a
    constant in the loss graph.
    """
    x_w1 = encode(bundle, x_o, m)
    with torch.no_grad():
        x_a1_det = defender_attack(bundle, x_w1.detach(), m, budget, seed=attack_seed)
        delta = x_a1_det - x_w1.detach()
    x_a1 = clamp_image(x_w1 + delta)

    l_a1 = F.mse_loss(decode(bundle, x_a1), m)
    l_w1 = F.mse_loss(decode(bundle, x_w1), m)
    l_i1 = (F.mse_loss(x_w1, x_o)
            + perceptual_distance(x_w1, x_o, perceptual_seed)) / 2.0
    total = l_a1 + lambda_w1 * l_w1 + lambda_i1 * l_i1
    components = {"L_a1": l_a1, "L_w1": l_w1, "L_i1": l_i1}
    return total, components, x_a1


def _adversarial_ba(bundle: ModelBundle, x_a1: torch.Tensor, m: torch.Tensor) -> float:
    with torch.no_grad():
        y = decode(bundle, x_a1)
    return bit_accuracy(round_message(y), m)


def _stage1_loop(bundle: ModelBundle, corpus: torch.Tensor, cfg: Stage1Config,
                 freeze_decoder: bool) -> ModelBundle:
    if corpus.numel() == 0:
        raise TrainingError("empty corpus")
    bundle = bundle.clone()
    torch.manual_seed(derive_seed(cfg.seed, "stage1"))
    g = generator(derive_seed(cfg.seed, "stage1_batches"))
    budget = cfg.budget()

    # the carrier blend gates are single scalars steering a much larger
    # effective change than any conv weight; give them a faster schedule so
    # they can traverse their range without destabilising the conv stacks.
    # The decoder's free-matrix and conv-head read paths are regularised
    # toward zero: they add nothing to clean accuracy (the matched-filter
    # path decodes exactly) but widen the adversary's attack surface.
    def _groups(net: torch.nn.Module, lr: float, decay: tuple[str, ...] = ()
                ) -> list[dict]:
        gate, decayed, rest = [], [], []
        for name, p in net.named_parameters():
            if name == "blend":
                gate.append(p)
            elif any(name.startswith(d) for d in decay):
                decayed.append(p)
            else:
                rest.append(p)
        return [{"params": rest, "lr": lr},
                {"params": decayed, "lr": 0.2 * lr, "weight_decay": 0.1},
                {"params": gate, "lr": 10.0 * lr}]

    opt_e = torch.optim.Adam(_groups(bundle.encoder, cfg.alpha_e))
    opt_d = torch.optim.AdamW(_groups(bundle.decoder, cfg.alpha_d,
                                      decay=("free", "conv_head")),
                              weight_decay=0.0)

    decoder_steps = 0
    batches = 0
    epoch_adv_ba: list[float] = []
    snapshot = bundle.clone()
    attack_counter = 0

    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(corpus), generator=g)
        batch_bas = []
        for start in range(0, len(corpus), cfg.batch_size):
            batches += 1
            x_o = corpus[perm[start:start + cfg.batch_size]]
            m = torch.randint(0, 2, (x_o.shape[0], bundle.meta.n),
                              generator=g).float()
            for i in range(1, cfg.iter_e + 1):
                attack_counter += 1
                total, _, x_a1 = loss_stage1(
                    bundle, x_o, m, budget,
                    lambda_w1=cfg.lambda_w1, lambda_i1=cfg.lambda_i1,
                    perceptual_seed=cfg.perceptual_seed,
                    attack_seed=derive_seed(cfg.seed, f"s1_attack_{attack_counter}"),
                )
                if not torch.isfinite(total):
                    bundle = snapshot
                    bundle.history["stage1_aborted_nan"] = True
                    return _finish_stage1(bundle, decoder_steps, batches, epoch_adv_ba)
                opt_e.zero_grad()
                opt_d.zero_grad()
                total.backward()
                opt_e.step()
                if i == cfg.iter_e:
                    ba = sum(
                        bit_accuracy(round_message(y), mm)
                        for y, mm in zip(decode(bundle, x_a1.detach()).detach(), m)
                    ) / x_o.shape[0]
                    batch_bas.append(ba)
                    if not freeze_decoder and ba < cfg.tau1:
                        opt_d.step()
                        decoder_steps += 1
        epoch_adv_ba.append(sum(batch_bas) / len(batch_bas))
        snapshot = bundle.clone()

    return _finish_stage1(bundle, decoder_steps, batches, epoch_adv_ba)


def _finish_stage1(bundle: ModelBundle, decoder_steps: int, batches: int,
                   epoch_adv_ba: list[float]) -> ModelBundle:
    bundle.encoder.eval()
    bundle.decoder.eval()
    bundle.history.update({
        "stage1_decoder_steps": decoder_steps,
        "stage1_batches": batches,
        "stage1_epoch_adv_ba": epoch_adv_ba,
    })
    return bundle


def run_stage1(bundle: ModelBundle, corpus: torch.Tensor,
               cfg: Stage1Config | None = None) -> ModelBundle:
    """Adversarial encoder fine-tuning with at most one conditional decoder
    step per batch."""
    return _stage1_loop(bundle, corpus, cfg or Stage1Config(), freeze_decoder=False)


def train_eat_baseline(bundle: ModelBundle, corpus: torch.Tensor,
                       cfg: Stage1Config | None = None) -> ModelBundle:
    """Encoder-only fine-tuning: the decoder stays bit-identical."""
    return _stage1_loop(bundle, corpus, cfg or Stage1Config(), freeze_decoder=True)


@dataclass
class JatConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 5e-4
    r: float = 20.0 / 255.0
    attack_steps: int = 10
    image_weight: float = 1.5
    perceptual_seed: int = 1337
    seed: int = 0


def train_jat_baseline(bundle: ModelBundle, corpus: torch.Tensor,
                       attacks: list[AttackSpec] | None = None,
                       cfg: JatConfig | None = None) -> ModelBundle:
    """Joint encoder+decoder training where each batch passes through one
    randomly sampled attack (defender-tailored PGD included)."""
    cfg = cfg or JatConfig()
    if corpus.numel() == 0:
        raise TrainingError("empty corpus")
    attacks = attacks if attacks is not None else [
        AttackSpec("jpeg", {"Q": 50}),
        AttackSpec("gaussian_noise", {"sigma": 0.1}),
    ]
    bundle = bundle.clone()
    torch.manual_seed(derive_seed(cfg.seed, "jat"))
    g = generator(derive_seed(cfg.seed, "jat_batches"))
    budget = AdvBudget(r=cfg.r, steps=cfg.attack_steps)
    params = list(bundle.encoder.parameters()) + list(bundle.decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    step = 0

    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(corpus), generator=g)
        for start in range(0, len(corpus), cfg.batch_size):
            step += 1
            x_o = corpus[perm[start:start + cfg.batch_size]]
            m = torch.randint(0, 2, (x_o.shape[0], bundle.meta.n),
                              generator=g).float()
            x_w = encode(bundle, x_o, m)
            pick = int(torch.randint(0, len(attacks) + 1, (1,), generator=g).item())
            if pick == len(attacks):
                with torch.no_grad():
                    adv = defender_attack(bundle, x_w.detach(), m, budget,
                                          seed=derive_seed(cfg.seed, f"jat_{step}"))
                    delta = adv - x_w.detach()
                x_n = clamp_image(x_w + delta)
            else:
                x_n = apply_distortion(x_w, attacks[pick],
                                       seed=derive_seed(cfg.seed, f"jat_{step}"))
            loss = (F.mse_loss(decode(bundle, x_n), m)
                    + cfg.image_weight * (
                        F.mse_loss(x_w, x_o)
                        + perceptual_distance(x_w, x_o, cfg.perceptual_seed)) / 2.0)
            if not torch.isfinite(loss):
                raise TrainingError("JAT loss diverged to NaN")
            opt.zero_grad()
            loss.backward()
            opt.step()

    bundle.encoder.eval()
    bundle.decoder.eval()
    bundle.history["jat_steps"] = step
    return bundle
