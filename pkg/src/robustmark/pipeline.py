"""Bridges the resolved config dict to typed stage/training configs."""

from __future__ import annotations

from .distortions import AttackSpec
from .models import ArchMeta, PretrainConfig
from .regeneration import DenoiserConfig
from .stage1 import JatConfig, Stage1Config
from .stage2 import Stage2Config


def arch_meta(cfg: dict) -> ArchMeta:
    m = cfg["model"]
    return ArchMeta(n=m["n"], height=m["height"], width=m["width"],
                    enc_width=m["enc_width"], dec_width=m["dec_width"])


def pretrain_config(cfg: dict, seed: int) -> PretrainConfig:
    m = cfg["model"]
    return PretrainConfig(
        epochs=m["pretrain_epochs"], batch_size=m["batch_size"],
        lr=m["pretrain_lr"], image_weight=m["pretrain_image_weight"],
        seed=seed)


def stage1_config(cfg: dict, seed: int) -> Stage1Config:
    s = cfg["stage1"]
    return Stage1Config(
        iter_e=s["iter_e"], alpha_e=s["alpha_e"], alpha_d=s["alpha_d"],
        r=s["r"], lambda_w1=s["lambda_w1"], lambda_i1=s["lambda_i1"],
        tau1=s["tau1"], epochs=s["epochs"], batch_size=s["batch_size"],
        attack_steps=s["attack_steps"],
        perceptual_seed=cfg["eval"]["perceptual_seed"], seed=seed)


def jat_config(cfg: dict, seed: int) -> JatConfig:
    s = cfg["stage1"]
    return JatConfig(epochs=s["epochs"], batch_size=s["batch_size"],
                     lr=s["alpha_e"], r=s["r"], attack_steps=s["attack_steps"],
                     perceptual_seed=cfg["eval"]["perceptual_seed"], seed=seed)


def stage2_attacks(cfg: dict, with_regeneration: bool = True) -> list[AttackSpec]:
    """The K=4 differentiable distortions plus the known regeneration proxy,
    weighted per config (JPEG highest)."""
    a, s2 = cfg["attacks"], cfg["stage2"]
    specs = [
        AttackSpec("jpeg", {"Q": a["jpeg_q"]}, weight=s2["jpeg_weight"]),
        AttackSpec("gaussian_noise", {"sigma": a["noise_sigma"]},
                   weight=s2["other_weight"]),
        AttackSpec("gaussian_blur", {"sigma": a["blur_sigma"]},
                   weight=s2["other_weight"]),
        AttackSpec("brightness", {"a": a["brightness"]},
                   weight=s2["other_weight"]),
    ]
    if with_regeneration:
        specs.append(AttackSpec("regeneration", {}, weight=s2["regen_weight"]))
    return specs


def stage2_config(cfg: dict, seed: int, with_regeneration: bool = True
                  ) -> Stage2Config:
    s = cfg["stage2"]
    return Stage2Config(
        iter_o=s["iter_o"], alpha_x=s["alpha_x"], psnr_floor=s["psnr_floor"],
        lambda_w2=s["lambda_w2"], lambda_i2=s["lambda_i2"], tau2=s["tau2"],
        attacks=stage2_attacks(cfg, with_regeneration),
        perceptual_seed=cfg["eval"]["perceptual_seed"], seed=seed)


def denoiser_config(cfg: dict, seed: int) -> DenoiserConfig:
    a = cfg["attacks"]
    return DenoiserConfig(noise_sigma=a["regen_sigma"],
                          steps=int(a["regen_steps"]), seed=seed)
