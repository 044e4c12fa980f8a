"""Two-stage robust image watermarking with a full attack suite.

Stage 1 adversarially fine-tunes the watermark encoder (with conditional
decoder updates) against a defender-tailored evasion attack; Stage 2 directly
optimizes each encoded image against differentiable distortion and
regeneration attacks under a PSNR floor, preserving the Stage-1 robustness
radius via a constrained image loss.
"""

from .adversarial import (AdvBudget, SurrogateBundle, black_q_attack,
                          black_s_attack, defender_attack, train_surrogate,
                          wevade_attack)
from .distortions import (AttackSpec, apply_geometric, brightness,
                          combined_distortion, gaussian_blur, gaussian_noise,
                          jpeg_approx, parse_attack_spec)
from .metrics import (bit_accuracy, clamp_image, perceptual_distance, psnr,
                      round_message, ssim)
from .models import (ArchMeta, ModelBundle, PretrainConfig, decode, encode,
                     init_models, load_checkpoint, pretrain_base,
                     save_checkpoint)
from .regeneration import (DenoiserBundle, DenoiserConfig, regenerate,
                           train_denoiser)
from .stage1 import (JatConfig, Stage1Config, loss_stage1, run_stage1,
                     train_eat_baseline, train_jat_baseline)
from .stage2 import Stage2Config, loss_stage2, optimize_image, pgd_step_quality
from .theorem import TheoremReport, robustness_radius, verify_theorem

__all__ = [
    "AdvBudget", "ArchMeta", "AttackSpec", "DenoiserBundle", "DenoiserConfig",
    "JatConfig", "ModelBundle", "PretrainConfig", "Stage1Config",
    "Stage2Config", "SurrogateBundle", "TheoremReport",
    "apply_geometric", "bit_accuracy", "black_q_attack", "black_s_attack",
    "brightness", "clamp_image", "combined_distortion", "decode",
    "defender_attack", "encode", "gaussian_blur", "gaussian_noise",
    "init_models", "jpeg_approx", "load_checkpoint", "loss_stage1",
    "loss_stage2", "optimize_image", "parse_attack_spec",
    "perceptual_distance", "pgd_step_quality", "pretrain_base", "psnr",
    "regenerate", "robustness_radius", "round_message", "run_stage1",
    "save_checkpoint", "ssim", "train_denoiser", "train_eat_baseline",
    "train_jat_baseline", "train_surrogate", "verify_theorem",
    "wevade_attack",
]
