"""Noise-then-denoise regeneration attack with a trained conv denoiser.

Stands in for diffusion-based regeneration at desk scale: the attack adds
noise to the image and reconstructs it with a small U-shaped denoiser,
stripping high-frequency watermark patterns while preserving content.
Two independently seeded denoisers form the known/unknown regenerator pair.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoints
from .errors import TrainingError
from .metrics import clamp_image, psnr
from .seeding import derive_seed, generator


class DenoiserNet(nn.Module):
    """Small U-shaped conv net: two downsampling stages with skip connections."""

    def __init__(self, width: int = 24):
        super().__init__()
        w = width
        self.enc1 = nn.Sequential(nn.Conv2d(3, w, 3, padding=1), nn.ReLU(True),
                                  nn.Conv2d(w, w, 3, padding=1), nn.ReLU(True))
        self.enc2 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(True),
                                  nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(True))
        self.mid = nn.Sequential(nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.ReLU(True))
        self.up = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec = nn.Sequential(nn.Conv2d(2 * w, w, 3, padding=1), nn.ReLU(True),
                                 nn.Conv2d(w, 3, 3, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h1 = self.enc1(x)
        h2 = self.mid(self.enc2(h1))
        u = self.up(h2)
        return x + self.dec(torch.cat([u, h1], dim=1))


@dataclass
class DenoiserBundle:
    net: DenoiserNet
    train_seed: int
    noise_sigma: float = 0.1
    steps: int = 1
    trained: bool = False
    history: dict | None = None


@dataclass
class DenoiserConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 2e-3
    noise_sigma: float = 0.1
    steps: int = 1
    target_psnr: float = 26.0
    holdout_fraction: float = 0.2
    seed: int = 0


def train_denoiser(corpus: torch.Tensor, cfg: DenoiserConfig | None = None
                   ) -> DenoiserBundle:
    """Train denoise(x + sigma*z) toward x; held-out denoising PSNR must
    reach the configured target (default 26 dB at sigma=0.1)."""
    cfg = cfg or DenoiserConfig()
    if corpus.numel() == 0:
        raise TrainingError("empty corpus")
    torch.manual_seed(derive_seed(cfg.seed, "denoiser_init"))
    net = DenoiserNet()
    n_hold = max(1, int(len(corpus) * cfg.holdout_fraction))
    train, hold = corpus[:-n_hold], corpus[-n_hold:]

    g = generator(derive_seed(cfg.seed, "denoiser_noise"))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    epoch_losses = []
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(train), generator=g)
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            x = train[perm[start:start + cfg.batch_size]]
            noisy = x + cfg.noise_sigma * torch.randn(x.shape, generator=g)
            loss = F.mse_loss(clamp_image(net(noisy.clamp(0, 1))), x)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        epoch_losses.append(sum(losses) / len(losses))

    net.eval()
    with torch.no_grad():
        noisy = hold + cfg.noise_sigma * torch.randn(hold.shape, generator=g)
        rec = clamp_image(net(noisy.clamp(0, 1)))
        held_psnr = psnr(rec, hold)
    if held_psnr < cfg.target_psnr:
        raise TrainingError(
            f"denoiser did not converge: held-out PSNR {held_psnr:.2f} dB < "
            f"{cfg.target_psnr} at sigma={cfg.noise_sigma}"
        )
    return DenoiserBundle(
        net=net, train_seed=cfg.seed, noise_sigma=cfg.noise_sigma,
        steps=cfg.steps, trained=True,
        history={"epoch_losses": epoch_losses, "holdout_psnr": held_psnr},
    )


def regenerate(x: torch.Tensor, d: DenoiserBundle, seed: int = 0) -> torch.Tensor:
    """T repetitions of (add noise -> denoise -> clamp). Differentiable
    through the frozen denoiser; the noise draws are constants."""
    if not d.trained:
        raise RuntimeError("denoiser bundle is untrained")
    g = generator(derive_seed(seed, "regenerate"))
    net = copy.deepcopy(d.net).double() if x.dtype == torch.float64 else d.net
    out = x
    for _ in range(d.steps):
        z = torch.randn(x.shape, generator=g, dtype=x.dtype)
        noisy = clamp_image(out + d.noise_sigma * z)
        out = clamp_image(net(noisy.unsqueeze(0) if noisy.dim() == 3 else noisy))
        if noisy.dim() == 3:
            out = out.squeeze(0)
    return out


def save_denoiser(d: DenoiserBundle, path) -> None:
    meta = {
        "kind": "denoiser",
        "train_seed": d.train_seed,
        "noise_sigma": d.noise_sigma,
        "steps": d.steps,
        "trained": d.trained,
    }
    checkpoints.save_arrays(path, meta, dict(d.net.state_dict()))


def load_denoiser(path) -> DenoiserBundle:
    meta, arrays = checkpoints.load_arrays(path)
    net = DenoiserNet()
    net.load_state_dict(arrays)
    net.eval()
    return DenoiserBundle(
        net=net, train_seed=meta["train_seed"], noise_sigma=meta["noise_sigma"],
        steps=meta["steps"], trained=meta.get("trained", True),
    )
