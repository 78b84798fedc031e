"""Distortion and quality metrics: MSE, PSNR, MS-SSIM (raw and in dB), code rate.

Images are [H, W, 3] or [B, H, W, 3] arrays with pixel values on a known
scale (default [0, 1]). PSNR uses ``max_val = 1.0`` on normalized pixels,
equivalent to 255 on 8-bit data. MS-SSIM follows the standard 5-scale
definition with an 11-tap Gaussian window; images too small for 5 scales
fall back to 3 scales with a 7-tap window (reported via
:func:`ms_ssim_config`), and images too small even for that are rejected.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

__all__ = [
    "mse_distortion",
    "psnr",
    "ms_ssim",
    "ms_ssim_tensor",
    "ms_ssim_config",
    "ms_ssim_db",
    "code_rate",
    "QualityReport",
]

# Wang et al. scale weights for the 5-scale pyramid.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP_DB = 100.0


@dataclass
class QualityReport:
    """One evaluation point: distortion plus rate bookkeeping."""

    psnr_db: float
    ms_ssim: float
    ms_ssim_db: float
    mse: float
    code_rate: float
    ms_ssim_scales: int = 5


def _as_tensor(x):
    if torch.is_tensor(x):
        return x
    t = torch.as_tensor(x)
    return t if t.is_floating_point() else t.float()


def mse_distortion(x, x_hat):
    """Mean squared error (1/n) sum (x_i - x_hat_i)^2 over all elements."""
    x = _as_tensor(x)
    x_hat = _as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return float(torch.mean((x.double() - x_hat.double()) ** 2))


def psnr(x, x_hat, max_val=1.0):
    """Peak SNR in dB, 10*log10(max^2 / MSE), capped at 100 dB for MSE < 1e-10."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = mse_distortion(x, x_hat)
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(max_val * max_val / mse)


def ms_ssim_db(v):
    """MS-SSIM mapped to dB as -10*log10(1 - v), capped at 100 dB near 1."""
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"MS-SSIM value {v} outside [0, 1]")
    if v >= 1.0 - 1e-10:
        return 100.0
    return -10.0 * math.log10(1.0 - v)


def code_rate(n, k):
    """Code rate R = k/n: complex channel symbols per source dimension."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not (0 < k <= n):
        raise ValueError(f"k={k} must satisfy 0 < k <= n={n}")
    return k / n


def _scale_chain(side, levels):
    sides = [side]
    for _ in range(levels - 1):
        sides.append((sides[-1] + 1) // 2)
    return sides


def ms_ssim_config(height, width):
    """Pick (levels, window) for the MS-SSIM pyramid given the image size.

    Standard 5 scales with an 11-tap window need every pyramid level to fit
    the window (min side >= 161); small images fall back to 3 scales with a
    7-tap window. Returns (levels, win) or raises if even the fallback
    cannot fit.
    """
    side = min(height, width)
    if _scale_chain(side, 5)[-1] >= 11:
        return 5, 11
    if _scale_chain(side, 3)[-1] >= 7:
        return 3, 7
    raise ValueError(
        f"image side {side} too small for the 3-scale MS-SSIM fallback"
    )


def _gaussian_window(win, sigma=1.5, dtype=torch.float32):
    half = (win - 1) / 2.0
    coords = torch.arange(win, dtype=dtype) - half
    g = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter2d(x, window):
    # separable valid-mode Gaussian filtering, per channel
    c = x.shape[1]
    kx = window.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    ky = window.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    x = F.conv2d(x, kx, groups=c)
    return F.conv2d(x, ky, groups=c)


def _ssim_components(x, y, window, data_range):
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = _filter2d(x, window)
    mu_y = _filter2d(y, window)
    sigma_x = _filter2d(x * x, window) - mu_x * mu_x
    sigma_y = _filter2d(y * y, window) - mu_y * mu_y
    sigma_xy = _filter2d(x * y, window) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
    return lum.mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def _halve(x):
    pad_h = x.shape[2] % 2
    pad_w = x.shape[3] % 2
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return F.avg_pool2d(x, kernel_size=2)


def ms_ssim_tensor(x, y, data_range=1.0, levels=None, win=None):
    """Differentiable MS-SSIM over a batch; inputs [B, H, W, C], returns [B]."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if levels is None or win is None:
        levels, win = ms_ssim_config(x.shape[1], x.shape[2])
    weights = MS_SSIM_WEIGHTS[:levels]
    weights = [w / sum(weights) for w in weights]
    window = _gaussian_window(win, dtype=x.dtype)
    x = x.permute(0, 3, 1, 2)
    y = y.permute(0, 3, 1, 2)
    value = None
    for level in range(levels):
        lum, cs = _ssim_components(x, y, window, data_range)
        term = lum if level == levels - 1 else cs
        term = torch.relu(term)  # negative structure terms would break pow
        factor = term ** weights[level]
        value = factor if value is None else value * factor
        if level < levels - 1:
            x = _halve(x)
            y = _halve(y)
    return value


def ms_ssim(x, x_hat, data_range=1.0):
    """Multi-scale structural similarity in [0, 1], averaged over the batch."""
    x = _as_tensor(x)
    x_hat = _as_tensor(x_hat)
    if x.dim() == 3:
        x = x.unsqueeze(0)
        x_hat = x_hat.unsqueeze(0)
    with torch.no_grad():
        value = ms_ssim_tensor(x.float(), x_hat.float(), data_range)
    return float(value.mean().clamp(0.0, 1.0))


def quality_report(x, x_hat, n, k, max_val=1.0):
    """Bundle PSNR / MS-SSIM / MSE / rate for one batch of image pairs."""
    levels, _ = ms_ssim_config(_as_tensor(x).shape[-3], _as_tensor(x).shape[-2])
    v = ms_ssim(x, x_hat, data_range=max_val)
    return QualityReport(
        psnr_db=psnr(x, x_hat, max_val),
        ms_ssim=v,
        ms_ssim_db=ms_ssim_db(v),
        mse=mse_distortion(x, x_hat),
        code_rate=code_rate(n, k),
        ms_ssim_scales=levels,
    )
