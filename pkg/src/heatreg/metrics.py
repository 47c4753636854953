"""Registration quality metrics: SSIM, PSNR, mean SSD, and the percentage
improvement used in paired with/without comparisons."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError
from .grid import Volume, _require_same_dims

__all__ = ["MetricsReport", "ssim", "psnr", "mean_ssd", "improvement_percent", "evaluate"]

# PSNR of (near-)identical images is reported as an explicit infinity
# sentinel; serialization layers write the string "inf".
PSNR_MSE_FLOOR = 1e-300


@dataclass(frozen=True)
class MetricsReport:
    ssim: float
    psnr: float
    mean_ssd: float
    dynamic_range: float

    def to_dict(self) -> dict:
        return {
            "ssim": self.ssim,
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "mean_ssd": self.mean_ssd,
            "dynamic_range": self.dynamic_range,
        }


def _local_mean(arr: np.ndarray, sigma: float, norm: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local mean with the window renormalized over the
    in-bounds support, so boundary voxels use a proper weighted average."""
    radius = int(math.ceil(3.0 * sigma))
    smoothed = ndimage.gaussian_filter(arr, sigma, mode="constant", cval=0.0, radius=radius)
    return smoothed / norm


def _window_norm(dims, sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    return ndimage.gaussian_filter(np.ones(dims), sigma, mode="constant", cval=0.0, radius=radius)


def ssim(a: Volume, b: Volume, window_sigma: float = 1.5, L: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window (sigma in voxels),
    computed natively in the volume's dimensionality.

    Constants C1 = (0.01 L)^2 and C2 = (0.03 L)^2 follow the standard
    definition; the window is renormalized near boundaries.
    """
    _require_same_dims(a.dims, b.dims, "ssim")
    if L <= 0:
        raise InputError(f"dynamic range L must be > 0, got {L}")
    if window_sigma <= 0:
        raise InputError(f"window_sigma must be > 0, got {window_sigma}")
    norm = _window_norm(a.dims, window_sigma)
    mu_a = _local_mean(a.data, window_sigma, norm)
    mu_b = _local_mean(b.data, window_sigma, norm)
    e_aa = _local_mean(a.data * a.data, window_sigma, norm)
    e_bb = _local_mean(b.data * b.data, window_sigma, norm)
    e_ab = _local_mean(a.data * b.data, window_sigma, norm)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def psnr(a: Volume, b: Volume, L: float = 1.0) -> float:
    """10 * log10(L^2 / MSE); identical images give math.inf."""
    _require_same_dims(a.dims, b.dims, "psnr")
    if L <= 0:
        raise InputError(f"dynamic range L must be > 0, got {L}")
    diff = a.data - b.data
    mse = float(np.mean(diff * diff))
    if mse < PSNR_MSE_FLOOR:
        return math.inf
    return 10.0 * math.log10(L * L / mse)


def mean_ssd(a: Volume, b: Volume) -> float:
    """Mean per-voxel squared difference."""
    _require_same_dims(a.dims, b.dims, "mean_ssd")
    diff = a.data - b.data
    return float(np.mean(diff * diff))


def improvement_percent(baseline: float, improved: float, higher_is_better: bool) -> float:
    """Percentage improvement of `improved` over `baseline`.

    Higher-is-better metrics (SSIM, PSNR) use 100*(improved-baseline)/baseline;
    lower-is-better (SSD) uses 100*(baseline-improved)/baseline.
    """
    if baseline == 0:
        raise InputError("improvement_percent: baseline must be nonzero")
    if higher_is_better:
        return 100.0 * (improved - baseline) / baseline
    return 100.0 * (baseline - improved) / baseline


def evaluate(a: Volume, b: Volume, L: float = 1.0, window_sigma: float = 1.5) -> MetricsReport:
    """All metrics between two volumes in one report."""
    return MetricsReport(
        ssim=ssim(a, b, window_sigma=window_sigma, L=L),
        psnr=psnr(a, b, L=L),
        mean_ssd=mean_ssd(a, b),
        dynamic_range=L,
    )
