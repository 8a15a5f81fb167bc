"""Full-reference quality metrics for [0, 1] images."""

import math

import torch
import torch.nn.functional as F

from .errors import ShapeError

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 1e-10
_LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB against a unit peak, capped at 100."""
    _check_same_shape(a, b)
    mse = (a.double() - b.double()).pow(2).mean().item()
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def _as_luminance(x: torch.Tensor) -> torch.Tensor:
    """Normalize (H, W) / (C, H, W) / (B, C, H, W) input to a (B, 1, H, W) luma plane."""
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected an image or image batch, got {tuple(x.shape)}")
    c = x.shape[1]
    if c == 1:
        return x
    if c == 3:
        w = x.new_tensor(_LUMA_WEIGHTS).view(1, 3, 1, 1)
        return (x * w).sum(dim=1, keepdim=True)
    raise ShapeError(f"expected 1 or 3 channels, got {c}")


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-coords.pow(2) / (2 * sigma * sigma))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, size, size)


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Structural similarity on luminance, Gaussian 11x11 windows, mean over windows.

    Windows are fully interior (no padding), matching the reference
    formulation; inputs must be at least window_size on each side.
    """
    _check_same_shape(a, b)
    x = _as_luminance(a).double()
    y = _as_luminance(b).double()
    h, w = x.shape[-2:]
    if h < window_size or w < window_size:
        raise ShapeError(
            f"image {h}x{w} smaller than the {window_size}x{window_size} window"
        )
    win = _gaussian_window(window_size, sigma, x.dtype, x.device)
    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    var_x = F.conv2d(x * x, win) - mu_x * mu_x
    var_y = F.conv2d(y * y, win) - mu_y * mu_y
    cov = F.conv2d(x * y, win) - mu_x * mu_y
    c1 = k1 * k1  # unit peak
    c2 = k2 * k2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).mean().item()
