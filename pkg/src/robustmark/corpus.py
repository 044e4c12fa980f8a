"""Deterministic synthetic image corpus, plus ingestion of user image folders.

Synthetic images mix linear gradients, Gabor textures, and smoothed noise
fields, giving non-degenerate pixel statistics without any dataset download.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .errors import ConfigError
from .seeding import derive_seed, generator


def _gradient_field(h: int, w: int, g: torch.Generator) -> torch.Tensor:
    ys = torch.linspace(0, 1, h).reshape(-1, 1).expand(h, w)
    xs = torch.linspace(0, 1, w).reshape(1, -1).expand(h, w)
    a, b, c = torch.rand(3, generator=g) * 2 - 1
    field = a * xs + b * ys + c * xs * ys
    return field


def _gabor_field(h: int, w: int, g: torch.Generator) -> torch.Tensor:
    ys = torch.linspace(-1, 1, h).reshape(-1, 1).expand(h, w)
    xs = torch.linspace(-1, 1, w).reshape(1, -1).expand(h, w)
    theta = torch.rand((), generator=g).item() * math.pi
    # cap texture frequency so the corpus keeps a natural, denoisable
    # spectrum (regeneration attacks assume content survives mild denoising)
    freq = 2.0 + torch.rand((), generator=g).item() * 5.0
    phase = torch.rand((), generator=g).item() * 2 * math.pi
    sigma = 0.3 + torch.rand((), generator=g).item() * 0.5
    u = xs * math.cos(theta) + ys * math.sin(theta)
    envelope = torch.exp(-(xs**2 + ys**2) / (2 * sigma**2))
    return envelope * torch.sin(2 * math.pi * freq * u + phase)


def _smooth_noise(h: int, w: int, g: torch.Generator) -> torch.Tensor:
    coarse = torch.rand((1, 1, h // 8 + 2, w // 8 + 2), generator=g)
    fine = torch.nn.functional.interpolate(
        coarse, size=(h, w), mode="bicubic", align_corners=False)
    return fine.squeeze()


def generate_corpus(count: int = 64, height: int = 64, width: int = 64,
                    seed: int = 0) -> torch.Tensor:
    """Seed-deterministic corpus of shape (count, 3, H, W) in [0, 1]."""
    if height % 8 or width % 8:
        raise ConfigError("corpus image sides must be multiples of 8")
    images = []
    for i in range(count):
        g = generator(derive_seed(seed, f"corpus_{i}"))
        channels = []
        for _ in range(3):
            field = (
                0.6 * _gradient_field(height, width, g)
                + 0.5 * _gabor_field(height, width, g)
                + 0.8 * _smooth_noise(height, width, g)
            )
            lo, hi = field.min(), field.max()
            channels.append((field - lo) / (hi - lo + 1e-8))
        img = torch.stack(channels)
        # random per-image brightness/contrast so the corpus covers [0,1] well
        scale = 0.6 + 0.4 * torch.rand((), generator=g)
        offset = torch.rand((), generator=g) * (1 - scale)
        images.append((img * scale + offset).clamp(0, 1))
    return torch.stack(images)


def save_corpus(images: torch.Tensor, folder) -> list[Path]:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        arr = (img.numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
        path = folder / f"img_{i:04d}.png"
        PILImage.fromarray(arr).save(path)
        paths.append(path)
    return paths


def load_corpus(folder, height: int = 64, width: int = 64) -> torch.Tensor:
    """Load a folder of standard-format images, resized and center-cropped."""
    folder = Path(folder)
    if not folder.is_dir():
        raise IOError(f"corpus folder not readable: {folder}")
    paths = sorted(
        p for p in folder.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tiff")
    )
    if not paths:
        raise IOError(f"no images found in {folder}")
    images = []
    for p in paths:
        img = PILImage.open(p).convert("RGB")
        scale = max(height / img.height, width / img.width)
        img = img.resize(
            (max(width, round(img.width * scale)),
             max(height, round(img.height * scale))),
            PILImage.BILINEAR)
        left = (img.width - width) // 2
        top = (img.height - height) // 2
        img = img.crop((left, top, left + width, top + height))
        arr = np.asarray(img, dtype=np.float32) / 255.0
        images.append(torch.from_numpy(arr.transpose(2, 0, 1)))
    return torch.stack(images)


def histogram_coverage(images: torch.Tensor, bins: int = 20) -> float:
    """Fraction of [0,1] histogram bins that contain at least one pixel."""
    hist = torch.histc(images.flatten(), bins=bins, min=0.0, max=1.0)
    return (hist > 0).float().mean().item()
