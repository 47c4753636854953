"""Soft thresholding and the threshold search that keeps the surrogate cost a
tight upper bound on the plain SSD.

The surrogate is an upper bound iff the gap integral
sum(s * (s + 2*(F - W))) * voxel_volume with s = soft_threshold(h, t) is
nonnegative; tightness additionally caps it at a small epsilon. The search
scans t upward from zero on a fixed grid and returns the first t satisfying
both inequalities; at t >= max|h| the integral is exactly zero, so the scan
always terminates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .grid import Volume, _require_same_dims

__all__ = [
    "BoundState",
    "soft_threshold",
    "soft_threshold_deriv",
    "gap_integral",
    "fit_threshold",
    "alpha2",
]

_SCAN_BLOCK = 64


def _check_threshold(t: float) -> float:
    t = float(t)
    if t < 0 or not math.isfinite(t):
        raise InputError(f"threshold must be >= 0 and finite, got {t}")
    return t


def _shrink(z: np.ndarray, t) -> np.ndarray:
    """sign(z) * max(|z| - t, 0); broadcasts over a leading axis of t."""
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def soft_threshold(h: Volume, t: float) -> Volume:
    """Shrinkage nonlinearity: z-t for z >= t, 0 for |z| <= t, z+t for z <= -t."""
    t = _check_threshold(t)
    return h.with_data(_shrink(h.data, t))


def soft_threshold_deriv(h: Volume, t: float) -> Volume:
    """Pointwise derivative of `soft_threshold`: 1 where |z| > t, else 0
    (subgradient 0 at the kinks |z| = t)."""
    t = _check_threshold(t)
    return h.with_data((np.abs(h.data) > t).astype(np.float64))


def _gap_sums(shrunk: np.ndarray, two_residual: np.ndarray, voxel_volume: float):
    """sum(s * (s + 2r)) * voxvol along the last axis, shared by the scalar
    and the blocked-scan paths so both produce bitwise-identical sums."""
    return np.sum(shrunk * (shrunk + two_residual), axis=-1) * voxel_volume


def gap_integral(h: Volume, t: float, fixed: Volume, moving_warped: Volume) -> float:
    """Discretized bound-gap integral; algebraically 2 * (ub_ssd - ssd)."""
    t = _check_threshold(t)
    _require_same_dims(h.dims, fixed.dims, "gap_integral")
    _require_same_dims(h.dims, moving_warped.dims, "gap_integral")
    two_r = 2.0 * (fixed.data.ravel() - moving_warped.data.ravel())
    s = _shrink(h.data.ravel(), t)
    return float(_gap_sums(s, two_r, h.voxel_volume))


def fit_threshold(
    h: Volume, fixed: Volume, moving_warped: Volume, epsilon: float, stepsize: float
) -> float:
    """Scan t = 0, stepsize, 2*stepsize, ... and return the first t with
    0 <= gap_integral(h, t, F, W) <= epsilon.

    Terminates within ceil(max|h| / stepsize) + 1 scan steps: at t >= max|h|
    the shrunk heatmap vanishes and the integral is exactly zero.
    """
    epsilon = float(epsilon)
    stepsize = float(stepsize)
    if epsilon <= 0 or not math.isfinite(epsilon):
        raise InputError(f"epsilon must be > 0 and finite, got {epsilon}")
    if stepsize <= 0 or not math.isfinite(stepsize):
        raise InputError(f"stepsize must be > 0 and finite, got {stepsize}")
    _require_same_dims(h.dims, fixed.dims, "fit_threshold")
    _require_same_dims(h.dims, moving_warped.dims, "fit_threshold")

    hflat = h.data.ravel()
    two_r = 2.0 * (fixed.data.ravel() - moving_warped.data.ravel())
    voxvol = h.voxel_volume
    hmax = float(np.abs(hflat).max())
    k_last = int(math.ceil(hmax / stepsize))
    # candidate k = k_last always satisfies the condition (gap exactly 0);
    # scan in blocks to keep the per-step cost a vectorized operation.
    for k0 in range(0, k_last + 1, _SCAN_BLOCK):
        ks = np.arange(k0, min(k0 + _SCAN_BLOCK, k_last + 1))
        ts = ks * stepsize
        s = _shrink(hflat[None, :], ts[:, None])
        gaps = _gap_sums(s, two_r[None, :], voxvol)
        ok = (gaps >= 0.0) & (gaps <= epsilon)
        hits = np.flatnonzero(ok)
        if hits.size:
            return float(ts[hits[0]])
    raise AssertionError("threshold scan failed to terminate; unreachable by construction")


def alpha2(h: Volume, t: float, a1: Volume) -> Volume:
    """Pull the residual signal back through the soft threshold:
    alpha2 = soft_threshold_deriv(h, t) * alpha1."""
    t = _check_threshold(t)
    _require_same_dims(h.dims, a1.dims, "alpha2")
    return a1.with_data(soft_threshold_deriv(h, t).data * a1.data)


@dataclass(frozen=True)
class BoundState:
    """Outcome of one threshold fit: the threshold, the tolerance and scan
    step it was fit with, and the scan cap max|h|."""

    t: float
    epsilon: float
    stepsize: float
    max_t: float

    def __post_init__(self):
        if self.t < 0:
            raise InputError(f"threshold must be >= 0, got {self.t}")
        if self.epsilon <= 0:
            raise InputError(f"epsilon must be > 0, got {self.epsilon}")
        if self.stepsize <= 0:
            raise InputError(f"stepsize must be > 0, got {self.stepsize}")

    @staticmethod
    def fit(h: Volume, fixed: Volume, moving_warped: Volume, epsilon: float, stepsize: float) -> "BoundState":
        t = fit_threshold(h, fixed, moving_warped, epsilon, stepsize)
        return BoundState(t=t, epsilon=epsilon, stepsize=stepsize, max_t=float(np.abs(h.data).max()))
