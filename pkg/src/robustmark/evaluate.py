"""Experiment orchestration: embed, attack, decode, record.

Attack ids marked unknown (combined distortion, the second regenerator, and
both black-box attacks) are excluded from every training/optimization loop
and only ever appear here, at evaluation time.

Metric conventions per record: for the 'clean' row, PSNR/SSIM/perceptual
compare the embedded image against the cover; for attack rows they compare
the attacked image against the embedded image (so the Black-Q row carries the
attack's quality cost).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, fields
from pathlib import Path

import torch

from .adversarial import (AdvBudget, black_q_attack, black_s_attack,
                          wevade_attack)
from .distortions import (AttackSpec, apply_distortion, apply_geometric,
                          combined_distortion, default_distortion_set,
                          GEOMETRIC_KINDS)
from .errors import ConfigError
from .metrics import bit_accuracy, perceptual_distance, psnr, round_message, ssim
from .models import ModelBundle, decode, encode
from .seeding import derive_seed
from .stage2 import Stage2Config, optimize_image

UNKNOWN_ATTACKS = frozenset({"combined_1_4", "regen_b", "black_s", "black_q"})

KNOWN_ATTACKS = frozenset(
    {"clean", "jpeg", "gaussian_noise", "gaussian_blur", "brightness",
     "regen_a", "wevade"} | GEOMETRIC_KINDS
)

ALL_ATTACKS = KNOWN_ATTACKS | UNKNOWN_ATTACKS | {"regen_adv", "adv_regen"}


@dataclass
class ExperimentRecord:
    run_id: str
    model_tag: str
    attack_id: str
    bit_accuracy: float
    psnr: float
    ssim: float
    perceptual: float
    wall_ms: int
    seed: int


RECORD_COLUMNS = [f.name for f in fields(ExperimentRecord)]


def _parse_attack_id(attack_id: str) -> tuple[str, dict]:
    """Split ids like 'jpeg@Q=30' into (base id, parameter overrides)."""
    base, _, rest = attack_id.partition("@")
    params = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            params[key] = float(val)
    return base, params


def _apply_attack(attack_id: str, bundle: ModelBundle, x_emb: torch.Tensor,
                  x_o: torch.Tensor, m: torch.Tensor, seed: int,
                  acfg: dict, denoiser_a=None, denoiser_b=None,
                  surrogate=None) -> tuple[torch.Tensor, int]:
    """Returns (attacked image, black-box query count or 0)."""
    base, over = _parse_attack_id(attack_id)
    queries = 0
    if base == "clean":
        return x_emb, 0
    if base == "jpeg":
        return apply_distortion(
            x_emb, AttackSpec("jpeg", {"Q": over.get("Q", acfg["jpeg_q"])}),
            seed), 0
    if base == "gaussian_noise":
        return apply_distortion(
            x_emb, AttackSpec("gaussian_noise",
                              {"sigma": over.get("sigma", acfg["noise_sigma"])}),
            seed), 0
    if base == "gaussian_blur":
        return apply_distortion(
            x_emb, AttackSpec("gaussian_blur",
                              {"sigma": over.get("sigma", acfg["blur_sigma"])}),
            seed), 0
    if base == "brightness":
        return apply_distortion(
            x_emb, AttackSpec("brightness",
                              {"a": over.get("a", acfg["brightness"])}),
            seed), 0
    if base == "combined_1_4":
        return combined_distortion(x_emb, default_distortion_set(), seed), 0
    if base in ("regen_a", "regen_b"):
        d = denoiser_a if base == "regen_a" else denoiser_b
        if d is None:
            raise ConfigError(f"attack {base!r} requires its denoiser")
        return apply_distortion(x_emb, AttackSpec("regeneration", {}), seed,
                                denoiser=d), 0
    if base == "wevade":
        budget = AdvBudget(r=over.get("r", acfg["wevade_r"]),
                           steps=int(over.get("steps", acfg["wevade_steps"])))
        return wevade_attack(bundle, x_emb, budget, seed), 0
    if base == "black_s":
        if surrogate is None:
            raise ConfigError("black_s requires a trained surrogate")
        budget = AdvBudget(r=acfg["wevade_r"], steps=int(acfg["wevade_steps"]))
        return black_s_attack(surrogate, x_emb, budget, seed), 0
    if base == "black_q":
        def oracle(img):
            with torch.no_grad():
                return round_message(decode(bundle, img))
        out, queries = black_q_attack(
            oracle, x_emb, tau_prime=acfg["black_q_tau"],
            query_budget=int(acfg["black_q_budget"]), seed=seed)
        return out, queries
    if base in GEOMETRIC_KINDS:
        spec = AttackSpec(base, over) if over else AttackSpec(base, {})
        return apply_geometric(x_emb, spec, seed, cover=x_o), 0
    if base in ("regen_adv", "adv_regen"):
        if denoiser_a is None:
            raise ConfigError(f"attack {base!r} requires a denoiser")
        budget = AdvBudget(r=acfg["wevade_r"], steps=int(acfg["wevade_steps"]))
        if base == "regen_adv":
            mid = apply_distortion(x_emb, AttackSpec("regeneration", {}), seed,
                                   denoiser=denoiser_a)
            return wevade_attack(bundle, mid, budget, seed), 0
        mid = wevade_attack(bundle, x_emb, budget, seed)
        return apply_distortion(mid, AttackSpec("regeneration", {}), seed,
                                denoiser=denoiser_a), 0
    raise ConfigError(f"unknown attack id {attack_id!r}")


def run_evaluation(bundle: ModelBundle, corpus: torch.Tensor,
                   attack_ids: list[str], acfg: dict, *,
                   run_id: str = "run", model_tag: str = "model",
                   seed: int = 0, stage2_cfg: Stage2Config | None = None,
                   denoiser_a=None, denoiser_b=None, surrogate=None,
                   max_images: int = 0) -> list[ExperimentRecord]:
    """Embed each corpus image (optionally Stage-2 optimized), run every
    attack, decode, and return one record per (image, attack) pair."""
    for aid in attack_ids:
        base, _ = _parse_attack_id(aid)
        if base not in ALL_ATTACKS:
            raise ConfigError(f"unknown attack id {aid!r}; valid: "
                              f"{', '.join(sorted(ALL_ATTACKS))}")
    images = corpus[:max_images] if max_images else corpus
    records = []
    for i, x_o in enumerate(images):
        img_seed = derive_seed(seed, f"eval_img_{i}")
        m = torch.randint(
            0, 2, (bundle.meta.n,),
            generator=torch.Generator().manual_seed(img_seed % (2**63))).float()
        with torch.no_grad():
            x_w1 = encode(bundle, x_o, m)
        if stage2_cfg is not None:
            x_emb = optimize_image(bundle, x_o, m, x_w1, stage2_cfg,
                                   denoiser=denoiser_a)
        else:
            x_emb = x_w1
        for aid in attack_ids:
            start = time.perf_counter()
            x_att, _ = _apply_attack(aid, bundle, x_emb, x_o, m,
                                     derive_seed(img_seed, aid), acfg,
                                     denoiser_a, denoiser_b, surrogate)
            with torch.no_grad():
                ba = bit_accuracy(round_message(decode(bundle, x_att)), m)
            wall_ms = int((time.perf_counter() - start) * 1000)
            ref = x_o if aid == "clean" else x_emb
            records.append(ExperimentRecord(
                run_id=run_id, model_tag=model_tag, attack_id=aid,
                bit_accuracy=ba, psnr=psnr(x_att, ref), ssim=ssim(x_att, ref),
                perceptual=perceptual_distance(x_att, ref).item(),
                wall_ms=wall_ms, seed=img_seed % (2**31),
            ))
    return records


def write_records(records: list[ExperimentRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow([getattr(r, c) for c in RECORD_COLUMNS])
    return path


def read_records(path) -> list[ExperimentRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        out = []
        for row in reader:
            out.append(ExperimentRecord(
                run_id=row["run_id"], model_tag=row["model_tag"],
                attack_id=row["attack_id"],
                bit_accuracy=float(row["bit_accuracy"]),
                psnr=float(row["psnr"]), ssim=float(row["ssim"]),
                perceptual=float(row["perceptual"]),
                wall_ms=int(row["wall_ms"]), seed=int(row["seed"]),
            ))
    return out
