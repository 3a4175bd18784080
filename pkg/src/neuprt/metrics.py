"""Image difference metrics on linear radiance clamped to [0, 1]."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InputError
from .images import Image

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10
LUMA = np.array([0.2126, 0.7152, 0.0722])
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    pa = a.pixels if isinstance(a, Image) else np.asarray(a)
    pb = b.pixels if isinstance(b, Image) else np.asarray(b)
    if pa.shape != pb.shape:
        raise InputError(f"image dimensions differ: {pa.shape} vs {pb.shape}")
    return np.clip(pa.astype(np.float64), 0, 1), np.clip(pb.astype(np.float64), 0, 1)


def mae(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.abs(x - y).mean())


def _psnr_from_mse(mse: float) -> float:
    return PSNR_CAP if mse < MSE_FLOOR else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(a, b) -> float:
    x, y = _pair(a, b)
    return _psnr_from_mse(float(((x - y) ** 2).mean()))


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    if min(x.shape) < SSIM_WIN:
        raise InputError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    w = _gaussian_window()
    c1, c2 = K1 ** 2, K2 ** 2
    filt = lambda img: ndimage.correlate(img, w, mode="nearest")[5:-5, 5:-5]
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.clip((num / den).mean(), -1.0, 1.0))


def ssim(a, b) -> float:
    """Mean local SSIM on luminance, 11x11 Gaussian window (sigma 1.5), valid region only."""
    x, y = _pair(a, b)
    if x.ndim == 3:
        x, y = x @ LUMA, y @ LUMA
    return _ssim_plane(x, y)


@dataclass
class ChannelMetrics:
    mae: float
    psnr_db: float
    ssim: float


@dataclass
class MetricsReport:
    mae: float
    psnr_db: float
    ssim: float
    width: int
    height: int
    channels: dict[str, ChannelMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def compare_images(a, b) -> MetricsReport:
    x, y = _pair(a, b)
    channels = {}
    for i, name in enumerate("rgb"):
        xc, yc = x[..., i], y[..., i]
        channels[name] = ChannelMetrics(float(np.abs(xc - yc).mean()),
                                        _psnr_from_mse(float(((xc - yc) ** 2).mean())),
                                        _ssim_plane(xc, yc))
    return MetricsReport(mae(x, y), psnr(x, y), ssim(x, y), x.shape[1], x.shape[0], channels)
