"""Image quality metrics and the rate-distortion objective."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

# standard five-scale exponents; shorter pyramids use a renormalized prefix
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03
# non-positive per-scale terms count as zero; positive ones are floored here
# before exponentiation so gradients stay finite
_TERM_FLOOR = 1e-8
PSNR_CAP = 99.0


def min_size_for_scales(scales: int) -> int:
    return (2 ** (scales - 1)) * WINDOW_SIZE


def fit_scales(height: int, width: int, scales: int) -> int:
    """Largest scale count not above ``scales`` that fits an ``height x width`` image."""
    fitted = scales
    while fitted > 1 and min(height, width) < min_size_for_scales(fitted):
        fitted -= 1
    if min(height, width) < min_size_for_scales(fitted):
        raise ValueError(f"image {height}x{width} is too small for MS-SSIM")
    return fitted


def scale_weights(scales: int) -> list[float]:
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must be in [1, {len(MS_SSIM_WEIGHTS)}], got {scales}")
    w = MS_SSIM_WEIGHTS[:scales]
    total = sum(w)
    return [v / total for v in w]


def _gaussian_window(dtype, device) -> torch.Tensor:
    coords = torch.arange(WINDOW_SIZE, dtype=dtype, device=device) - (WINDOW_SIZE - 1) / 2
    g = torch.exp(-(coords**2) / (2 * WINDOW_SIGMA**2))
    return g / g.sum()


def _blur(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, g: torch.Tensor, data_range: float):
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    var_x = _blur(x * x, g) - mu_x**2
    var_y = _blur(y * y, g) - mu_y**2
    cov = _blur(x * y, g) - mu_x * mu_y
    luminance = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs_map = (2 * cov + c2) / (var_x + var_y + c2)
    return (luminance * cs_map).mean((-2, -1)), cs_map.mean((-2, -1))


def _downsample(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        x = F.pad(x, (0, w % 2, 0, h % 2), mode="replicate")
    return F.avg_pool2d(x, 2)


def ms_ssim(
    x: torch.Tensor,
    y: torch.Tensor,
    scales: int = 4,
    data_range: float = 1.0,
    reduction: str = "mean",
) -> torch.Tensor:
    """Multi-scale SSIM with an 11-tap Gaussian window (sigma 1.5).

    Accepts ``(C, H, W)`` or ``(N, C, H, W)`` tensors. Per-channel scores are
    averaged, then samples are averaged unless ``reduction="none"``.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    need = min_size_for_scales(scales)
    if min(x.shape[-2:]) < need:
        raise ValueError(f"{scales}-scale MS-SSIM needs images of at least {need}px, got {tuple(x.shape[-2:])}")
    weights = scale_weights(scales)
    g = _gaussian_window(x.dtype, x.device)
    value = None
    for i, w in enumerate(weights):
        ssim, cs = _ssim_terms(x, y, g, data_range)
        raw = ssim if i == scales - 1 else cs
        floored = raw.clamp_min(_TERM_FLOOR) ** w
        # value zeroes non-positive terms; gradient follows the floored term
        term = floored + ((raw > 0) * floored - floored).detach()
        value = term if value is None else value * term
        if i < scales - 1:
            x, y = _downsample(x), _downsample(y)
    per_sample = value.mean(1)
    if reduction == "none":
        return per_sample
    return per_sample.mean()


def psnr(x: torch.Tensor, y: torch.Tensor, max_val: float = 1.0) -> float:
    mse = torch.mean((x.double() - y.double()) ** 2).item()
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(max_val**2 / mse))


def rd_loss(x, x_hat, rate_bits, num_pixels: int, lam: float, scales: int = 4):
    """``-MS-SSIM(x, x_hat) + lam * rate_bits / num_pixels``."""
    return -ms_ssim(x, x_hat, scales) + lam * (rate_bits / num_pixels)


def score(ms_ssim_value: float, bpp_value: float, lam: float) -> float:
    """Negated RD loss; higher is better."""
    return ms_ssim_value - lam * bpp_value
