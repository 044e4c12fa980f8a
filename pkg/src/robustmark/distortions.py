"""Differentiable training-time distortions and evaluation-only geometric attacks.

The four differentiable distortions (JPEG, Gaussian noise, Gaussian blur,
brightness) can sit inside optimization loops; JPEG uses straight-through
rounding (forward: exact round, backward: identity). Geometric attacks are
evaluation-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ParameterError
from .metrics import clamp_image
from .seeding import generator

DIFFERENTIABLE_KINDS = frozenset(
    {"jpeg", "gaussian_noise", "gaussian_blur", "brightness", "regeneration", "combined"}
)
GEOMETRIC_KINDS = frozenset(
    {"crop", "resize", "dropout", "salt_pepper", "rotation", "hue"}
)


@dataclass
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)
    differentiable: bool = False
    weight: float = 1.0
    unknown: bool = False  # excluded from any training/optimization loop

    def __post_init__(self):
        if self.kind in DIFFERENTIABLE_KINDS:
            self.differentiable = True
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ParameterError(f"invalid attack weight {self.weight}")


def parse_attack_spec(text: str) -> AttackSpec:
    """Parse 'kind:key=val,key=val' strings, e.g. 'jpeg:Q=50'."""
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    params: dict = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            if not val:
                raise ParameterError(f"malformed attack parameter {item!r} in {text!r}")
            try:
                params[key.strip()] = float(val)
            except ValueError:
                params[key.strip()] = val.strip()
    return AttackSpec(kind=kind, params=params)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    return x, False


def _straight_through_round(x: torch.Tensor) -> torch.Tensor:
    return x + (x.round() - x).detach()


def _soft_round(x: torch.Tensor) -> torch.Tensor:
    # smooth periodic approximation of rounding: exact at integers and
    # half-integers, gradient 1 - cos(2*pi*x) carries quantization structure
    return x - torch.sin(2.0 * torch.pi * x) / (2.0 * torch.pi)


# Standard JPEG base quantization tables (luminance, chrominance).
_Q_LUMA = torch.tensor([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=torch.float32)
_Q_CHROMA = torch.tensor([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=torch.float32)


def _dct_matrix(dtype: torch.dtype) -> torch.Tensor:
    k = torch.arange(8, dtype=dtype)
    n = torch.arange(8, dtype=dtype)
    mat = torch.cos((2 * n + 1).unsqueeze(0) * k.unsqueeze(1) * math.pi / 16)
    mat = mat * math.sqrt(2.0 / 8)
    mat[0] = mat[0] / math.sqrt(2.0)
    return mat


def _scaled_tables(quality: float, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    if quality < 50:
        s = 5000.0 / quality
    else:
        s = 200.0 - 2.0 * quality
    tabs = []
    for base in (_Q_LUMA, _Q_CHROMA):
        t = torch.floor((base * s + 50.0) / 100.0).clamp(1.0, 255.0)
        tabs.append(t.to(dtype))
    return tabs[0], tabs[1]


def _rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 0.5
    return torch.stack([y, cb, cr], dim=1)


def _ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x[:, 0], x[:, 1] - 0.5, x[:, 2] - 0.5
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def _blockify(x: torch.Tensor) -> torch.Tensor:
    # (B,C,H,W) -> (B,C,H/8,W/8,8,8)
    b, c, h, w = x.shape
    return (
        x.reshape(b, c, h // 8, 8, w // 8, 8).permute(0, 1, 2, 4, 3, 5)
    )


def _unblockify(blocks: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, c = blocks.shape[:2]
    return blocks.permute(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def jpeg_approx(x: torch.Tensor, quality: float,
                rounding: str = "straight_through") -> torch.Tensor:
    """Differentiable JPEG: YCbCr, 8x8 block DCT, quantization scaled for Q
    with straight-through rounding, inverse transform, clamp. No chroma
    subsampling.

    ``rounding="soft"`` replaces the quantizer with a smooth periodic
    approximation whose gradient carries the quantization structure (used
    inside per-image optimization); ``rounding="none"`` skips coefficient
    rounding entirely, exposing the smooth path that the straight-through
    estimator backpropagates through (used by gradient checks; the forward
    is then not a codec)."""
    if not (1 <= quality <= 100):
        raise ParameterError(f"JPEG quality {quality} outside [1, 100]")
    if rounding not in ("straight_through", "soft", "none"):
        raise ParameterError(f"unknown rounding mode {rounding!r}")
    xb, squeeze = _as_batch(x)
    h, w = xb.shape[-2:]
    if h % 8 or w % 8:
        raise ParameterError("JPEG approximation requires H, W multiples of 8")

    dtype = xb.dtype
    dct = _dct_matrix(dtype)
    q_luma, q_chroma = _scaled_tables(float(quality), dtype)
    q_table = torch.stack([q_luma, q_chroma, q_chroma]).reshape(1, 3, 1, 1, 8, 8)

    ycc = _rgb_to_ycbcr(xb) * 255.0 - 128.0
    blocks = _blockify(ycc)
    coeff = torch.einsum("ij,bcuvjk,lk->bcuvil", dct, blocks, dct)
    scaled = coeff / q_table
    if rounding == "straight_through":
        scaled = _straight_through_round(scaled)
    elif rounding == "soft":
        scaled = _soft_round(scaled)
    quant = scaled * q_table
    rec = torch.einsum("ji,bcuvjk,kl->bcuvil", dct, quant, dct)
    out = _ycbcr_to_rgb((_unblockify(rec, h, w) + 128.0) / 255.0)
    out = clamp_image(out)
    return out.squeeze(0) if squeeze else out


def gaussian_noise_t(x: torch.Tensor, sigma: float, g: torch.Generator) -> torch.Tensor:
    """Additive Gaussian noise drawn from an explicit generator."""
    if sigma < 0:
        raise ParameterError(f"negative noise sigma {sigma}")
    if sigma == 0:
        return x
    z = torch.randn(x.shape, generator=g, dtype=x.dtype)
    return clamp_image(x + sigma * z)


def gaussian_noise(x: torch.Tensor, sigma: float, seed: int = 0) -> torch.Tensor:
    return gaussian_noise_t(x, sigma, generator(seed))


def _gaussian_kernel1d(sigma: float, dtype: torch.dtype) -> torch.Tensor:
    radius = int(math.ceil(3 * sigma))
    coords = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(coords**2) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian convolution with reflect padding; sigma=0 is identity."""
    if sigma < 0:
        raise ParameterError(f"negative blur sigma {sigma}")
    if sigma == 0:
        return x
    xb, squeeze = _as_batch(x)
    k = _gaussian_kernel1d(sigma, xb.dtype)
    r = (len(k) - 1) // 2
    c = xb.shape[1]
    kh = k.reshape(1, 1, 1, -1).expand(c, 1, 1, -1)
    kv = k.reshape(1, 1, -1, 1).expand(c, 1, -1, 1)
    out = F.pad(xb, (r, r, 0, 0), mode="reflect")
    out = F.conv2d(out, kh, groups=c)
    out = F.pad(out, (0, 0, r, r), mode="reflect")
    out = F.conv2d(out, kv, groups=c)
    out = clamp_image(out)
    return out.squeeze(0) if squeeze else out


def brightness(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Multiplicative brightness change, clamped."""
    if factor <= 0:
        raise ParameterError(f"brightness factor must be positive, got {factor}")
    return clamp_image(x * factor)


def combined_distortion(x: torch.Tensor, specs: list[AttackSpec], seed: int = 0
                        ) -> torch.Tensor:
    """Sequential composition of differentiable distortions in list order."""
    out = x
    for i, spec in enumerate(specs):
        if not spec.differentiable or spec.kind in ("combined",):
            raise ParameterError(
                f"combined_distortion only composes differentiable primitive "
                f"attacks, got {spec.kind!r}"
            )
        out = apply_distortion(out, spec, seed=seed + i)
    return out


def apply_distortion(x: torch.Tensor, spec: AttackSpec, seed: int = 0,
                     denoiser=None) -> torch.Tensor:
    """Dispatch one differentiable distortion by AttackSpec."""
    if spec.kind == "jpeg":
        return jpeg_approx(x, spec.params.get("Q", 50))
    if spec.kind == "gaussian_noise":
        return gaussian_noise(x, spec.params.get("sigma", 0.1), seed)
    if spec.kind == "gaussian_blur":
        return gaussian_blur(x, spec.params.get("sigma", 0.5))
    if spec.kind == "brightness":
        return brightness(x, spec.params.get("a", 1.5))
    if spec.kind == "regeneration":
        if denoiser is None:
            raise ParameterError("regeneration attack requires a denoiser bundle")
        from .regeneration import regenerate
        return regenerate(x, denoiser, seed)
    raise ParameterError(f"unknown differentiable attack kind {spec.kind!r}")


def default_distortion_set() -> list[AttackSpec]:
    """The K=4 training distortions at their default parameters, with the
    JPEG term weighted highest."""
    return [
        AttackSpec("jpeg", {"Q": 50}, weight=1.0),
        AttackSpec("gaussian_noise", {"sigma": 0.1}, weight=0.1),
        AttackSpec("gaussian_blur", {"sigma": 0.5}, weight=0.1),
        AttackSpec("brightness", {"a": 1.5}, weight=0.1),
    ]


# -- evaluation-only geometric attacks ---------------------------------------


def _rgb_to_hsv(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    maxc, _ = x.max(dim=1)
    minc, _ = x.min(dim=1)
    v = maxc
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / (maxc + 1e-12), torch.zeros_like(maxc))
    dz = delta + 1e-12
    hr = ((g - b) / dz) % 6
    hg = (b - r) / dz + 2
    hb = (r - g) / dz + 4
    h = torch.where(maxc == r, hr, torch.where(maxc == g, hg, hb)) / 6.0
    h = torch.where(delta > 0, h, torch.zeros_like(h))
    return torch.stack([h, s, v], dim=1)


def _hsv_to_rgb(x: torch.Tensor) -> torch.Tensor:
    h, s, v = x[:, 0] % 1.0, x[:, 1], x[:, 2]
    i = torch.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    i = i.long() % 6
    r = torch.where(i == 0, v, torch.where(i == 1, q, torch.where(
        i == 2, p, torch.where(i == 3, p, torch.where(i == 4, t, v)))))
    g = torch.where(i == 0, t, torch.where(i == 1, v, torch.where(
        i == 2, v, torch.where(i == 3, q, torch.where(i == 4, p, p)))))
    b = torch.where(i == 0, p, torch.where(i == 1, p, torch.where(
        i == 2, t, torch.where(i == 3, v, torch.where(i == 4, v, q)))))
    return torch.stack([r, g, b], dim=1)


def apply_geometric(x: torch.Tensor, spec: AttackSpec, seed: int = 0,
                    cover: torch.Tensor | None = None) -> torch.Tensor:
    """Evaluation-only geometric transform. `cover` is needed for dropout
    (dropped pixels are replaced by the cover image's pixels)."""
    xb, squeeze = _as_batch(x)
    g = generator(seed)
    h, w = xb.shape[-2:]
    kind, p = spec.kind, spec.params

    if kind == "crop":
        # p is the kept area fraction; everything outside is zeroed
        frac = float(p.get("p", 0.035))
        side = math.sqrt(frac)
        ch, cw = max(1, round(h * side)), max(1, round(w * side))
        top = int(torch.randint(0, h - ch + 1, (1,), generator=g).item())
        left = int(torch.randint(0, w - cw + 1, (1,), generator=g).item())
        out = torch.zeros_like(xb)
        out[..., top:top + ch, left:left + cw] = xb[..., top:top + ch, left:left + cw]
    elif kind == "resize":
        r = float(p.get("r", 0.7))
        if r <= 0:
            raise ParameterError(f"resize ratio must be positive, got {r}")
        down = F.interpolate(xb, scale_factor=r, mode="bilinear", align_corners=False)
        out = F.interpolate(down, size=(h, w), mode="bilinear", align_corners=False)
    elif kind == "dropout":
        frac = float(p.get("p", 0.3))
        if cover is None:
            raise ParameterError("dropout requires the cover image")
        cb, _ = _as_batch(cover)
        mask = (torch.rand((xb.shape[0], 1, h, w), generator=g) < frac).to(xb.dtype)
        out = xb * (1 - mask) + cb * mask
    elif kind == "salt_pepper":
        frac = float(p.get("p", 0.1))
        u = torch.rand((xb.shape[0], 1, h, w), generator=g)
        salt = (u < frac / 2).to(xb.dtype)
        pepper = ((u >= frac / 2) & (u < frac)).to(xb.dtype)
        out = xb * (1 - salt - pepper) + salt
    elif kind == "rotation":
        angle = math.radians(float(p.get("a", 30.0)))
        cos, sin = math.cos(angle), math.sin(angle)
        theta = torch.tensor(
            [[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=xb.dtype
        ).unsqueeze(0).expand(xb.shape[0], -1, -1)
        grid = F.affine_grid(theta, list(xb.shape), align_corners=False)
        out = F.grid_sample(xb, grid, mode="bilinear", align_corners=False)
    elif kind == "hue":
        delta = float(p.get("delta", 0.2))
        hsv = _rgb_to_hsv(xb)
        hsv = torch.stack([hsv[:, 0] + delta, hsv[:, 1], hsv[:, 2]], dim=1)
        out = _hsv_to_rgb(hsv)
    else:
        raise ParameterError(f"unknown geometric attack kind {kind!r}")

    out = clamp_image(out)
    return out.squeeze(0) if squeeze else out


def default_geometric_set() -> list[AttackSpec]:
    return [
        AttackSpec("crop", {"p": 0.035}),
        AttackSpec("resize", {"r": 0.7}),
        AttackSpec("dropout", {"p": 0.3}),
        AttackSpec("salt_pepper", {"p": 0.1}),
        AttackSpec("rotation", {"a": 30.0}),
        AttackSpec("hue", {"delta": 0.2}),
    ]
