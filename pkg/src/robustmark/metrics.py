"""Image/message primitives and quality metrics shared by the whole pipeline.

Images are torch tensors shaped (3, H, W) or (B, 3, H, W) with values in
[0, 1]. Messages are 1-D float tensors with entries in {0, 1}; decoder
outputs (logits) are unconstrained 1-D float tensors of the same length.
All functions here are pure and safe to call concurrently.
"""

import math

import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError
from .seeding import generator

PSNR_CAP_DB = 99.0

# ITU-R BT.601 luma coefficients.
_LUMA = (0.299, 0.587, 0.114)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def clamp_image(x: torch.Tensor) -> torch.Tensor:
    """Clip pixel values to [0, 1]."""
    return x.clamp(0.0, 1.0)


def psnr(a: torch.Tensor, b: torch.Tensor, cap: float = PSNR_CAP_DB) -> float:
    """PSNR in dB over the flattened tensor with peak 1.0; `cap` when MSE = 0."""
    _check_same_shape(a, b)
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse <= 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def rmse(a: torch.Tensor, b: torch.Tensor) -> float:
    """Root-mean-square pixel difference (the perturbation norm used for
    robustness-radius measurements)."""
    _check_same_shape(a, b)
    return math.sqrt(torch.mean((a.double() - b.double()) ** 2).item())


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return g.outer(g)


def _luminance(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[..., 0, :, :], x[..., 1, :, :], x[..., 2, :, :]
    return _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean local SSIM on luminance, 11x11 Gaussian window sigma=1.5,
    C1=(0.01)^2, C2=(0.03)^2."""
    _check_same_shape(a, b)
    if a.shape[-1] < 11 or a.shape[-2] < 11:
        raise DimensionError("image smaller than the 11x11 SSIM window")
    ya = _luminance(a.double()).reshape(-1, 1, a.shape[-2], a.shape[-1])
    yb = _luminance(b.double()).reshape(-1, 1, b.shape[-2], b.shape[-1])
    win = _gaussian_window(11, 1.5, torch.float64).reshape(1, 1, 11, 11)

    c1, c2 = 0.01**2, 0.03**2
    mu_a = F.conv2d(ya, win)
    mu_b = F.conv2d(yb, win)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = F.conv2d(ya * ya, win) - mu_aa
    var_b = F.conv2d(yb * yb, win) - mu_bb
    cov = F.conv2d(ya * yb, win) - mu_ab

    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return (num / den).mean().item()


class _PerceptualFeatures(torch.nn.Module):
    """Frozen 3-layer conv stack with seed-deterministic random weights.

    Stands in for a pretrained perceptual network at desk scale; the seed is
    a config key so a learned backend can be swapped in behind
    perceptual_distance.
    """

    def __init__(self, seed: int):
        super().__init__()
        g = generator(seed)
        widths = [3, 16, 32, 64]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            w = torch.randn((cout, cin, 3, 3), generator=g) / math.sqrt(cin * 9)
            layers.append(w)
        self.weights = torch.nn.ParameterList(
            torch.nn.Parameter(w, requires_grad=False) for w in layers
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for i, w in enumerate(self.weights):
            h = F.conv2d(h, w.to(h.dtype), stride=2, padding=1)
            if i < len(self.weights) - 1:
                h = F.leaky_relu(h, 0.2)
            # unit-normalize along channels, as perceptual metrics do
            feats.append(h / (h.norm(dim=-3, keepdim=True) + 1e-8))
        return feats


_FEATURE_CACHE: dict[int, _PerceptualFeatures] = {}

DEFAULT_PERCEPTUAL_SEED = 1337


def perceptual_distance(
    a: torch.Tensor, b: torch.Tensor, feature_seed: int = DEFAULT_PERCEPTUAL_SEED
) -> torch.Tensor:
    """Weighted L2 distance between frozen random-conv feature maps.

    Returns a 0-dim tensor so it can participate in autograd losses;
    use .item() for the scalar.
    """
    _check_same_shape(a, b)
    net = _FEATURE_CACHE.get(feature_seed)
    if net is None:
        net = _PerceptualFeatures(feature_seed)
        _FEATURE_CACHE[feature_seed] = net
    xa = a.reshape(-1, 3, a.shape[-2], a.shape[-1])
    xb = b.reshape(-1, 3, b.shape[-2], b.shape[-1])
    total = xa.new_zeros(())
    for fa, fb in zip(net(xa), net(xb)):
        total = total + ((fa - fb) ** 2).mean()
    return total


def bit_accuracy(m1: torch.Tensor, m2: torch.Tensor) -> float:
    """Fraction of matching bit positions."""
    if m1.shape != m2.shape:
        raise DimensionError(f"message length mismatch: {m1.shape} vs {m2.shape}")
    return (m1.round() == m2.round()).double().mean().item()


def round_message(y: torch.Tensor) -> torch.Tensor:
    """Round logits to the nearest integer and clamp to {0, 1}.

    Ties at exactly 0.5 round up.
    """
    if not torch.isfinite(y).all():
        raise NumericError("non-finite message logits")
    return torch.floor(y + 0.5).clamp(0.0, 1.0)


def random_message(n: int, seed: int) -> torch.Tensor:
    """Seeded uniform random bit vector of length n."""
    g = generator(seed)
    return torch.randint(0, 2, (n,), generator=g).float()
