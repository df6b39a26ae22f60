"""
Reconstruction quality metrics.

PSNR uses peak = max |x_ref| unless a peak is given. SSIM is the mean of the
local SSIM map over every fully contained 11x11 Gaussian window (sigma 1.5,
K1 = 0.01, K2 = 0.03).
"""

from typing import Optional

import logging
import math

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel
from scipy.signal import correlate

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def _same_shape(x_hat: Array, x_ref: Array) -> None:
    if x_hat.shape != x_ref.shape:
        raise MetricError(f"Shapes differ: {x_hat.shape} vs {x_ref.shape}")


def _peak(x_ref: Array, peak: Optional[float]) -> float:
    value = float(np.max(np.abs(x_ref))) if peak is None else peak
    if not value > 0:
        raise MetricError(f"PSNR/SSIM peak must be positive, got {value}")
    return value


def psnr(x_hat: Array, x_ref: Array, peak: Optional[float] = None) -> float:
    """10 log10(peak² / MSE); +inf when the inputs are identical."""
    _same_shape(x_hat, x_ref)
    peak = _peak(x_ref, peak)
    mse = float(np.mean((x_hat - x_ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def capped(value: float) -> float:
    return min(value, PSNR_CAP)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Array:
    offsets = np.arange(size) - (size - 1) / 2
    g = np.exp(-(offsets**2) / (2 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


class SsimTerms(BaseModel):
    ssim: float
    luminance: float
    contrast_structure: float


def ssim_terms(x_hat: Array, x_ref: Array, peak: Optional[float] = None) -> SsimTerms:
    _same_shape(x_hat, x_ref)
    if x_ref.ndim != 2 or min(x_ref.shape) < SSIM_WINDOW:
        raise MetricError(
            f"SSIM needs 2D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x_ref.shape}"
        )
    peak = _peak(x_ref, peak)
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    window = gaussian_window()

    def local(image: Array) -> Array:
        return correlate(image, window, mode="valid")

    mu_x = local(x_hat)
    mu_y = local(x_ref)
    var_x = local(x_hat * x_hat) - mu_x * mu_x
    var_y = local(x_ref * x_ref) - mu_y * mu_y
    cov = local(x_hat * x_ref) - mu_x * mu_y
    luminance = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    contrast_structure = (2 * cov + c2) / (var_x + var_y + c2)
    return SsimTerms(
        ssim=float(np.mean(luminance * contrast_structure)),
        luminance=float(np.mean(luminance)),
        contrast_structure=float(np.mean(contrast_structure)),
    )


def ssim(x_hat: Array, x_ref: Array, peak: Optional[float] = None) -> float:
    return ssim_terms(x_hat, x_ref, peak).ssim


def nrmse(x_hat: Array, x_ref: Array) -> float:
    """||x_hat - x_ref|| / ||x_ref||."""
    _same_shape(x_hat, x_ref)
    ref_norm = float(np.linalg.norm(x_ref))
    if ref_norm == 0.0:
        raise MetricError("NRMSE is undefined for a zero reference")
    return float(np.linalg.norm(x_hat - x_ref)) / ref_norm


def relative_change(x_t: Array, x_prev: Array) -> float:
    """e_t = ||x_t - x_prev||² / ||x_t||²."""
    _same_shape(x_t, x_prev)
    norm = float(np.sum(x_t * x_t))
    if norm == 0.0:
        raise MetricError("Relative change is undefined for a zero estimate")
    diff = x_t - x_prev
    return float(np.sum(diff * diff)) / norm


class MetricsReport(BaseModel):
    psnr: float
    ssim: Optional[float] = None
    nrmse: float

    def csv_fields(self) -> list[str]:
        ssim = "" if self.ssim is None else f"{self.ssim:.6f}"
        return [f"{capped(self.psnr):.6f}", ssim, f"{self.nrmse:.6f}"]


def evaluate(x_hat: Array, x_ref: Array, peak: Optional[float] = None) -> MetricsReport:
    """PSNR and NRMSE always; SSIM for images large enough for the window."""
    report_ssim: Optional[float] = None
    if x_ref.ndim == 2 and min(x_ref.shape) >= SSIM_WINDOW:
        report_ssim = ssim(x_hat, x_ref, peak)
    return MetricsReport(
        psnr=psnr(x_hat, x_ref, peak),
        ssim=report_ssim,
        nrmse=nrmse(x_hat, x_ref),
    )
