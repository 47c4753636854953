"""Shared naive oracle implementations.

Everything here is written as plain per-voxel loops, independent of the
library's vectorized code paths, so tests compare two genuinely different
routes to the same numbers.
"""
import itertools
import math

import numpy as np
import pytest


def naive_sample(data: np.ndarray, point) -> float:
    """Multilinear interpolation with clamp-to-edge, corner by corner."""
    d = data.ndim
    idx0, frac = [], []
    for a in range(d):
        c = min(max(float(point[a]), 0.0), data.shape[a] - 1.0)
        if data.shape[a] == 1:
            idx0.append(0)
            frac.append(0.0)
        else:
            i0 = min(int(math.floor(c)), data.shape[a] - 2)
            idx0.append(i0)
            frac.append(c - i0)
    total = 0.0
    for corner in itertools.product((0, 1), repeat=d):
        w = 1.0
        idx = []
        for a, bit in enumerate(corner):
            w *= frac[a] if bit else 1.0 - frac[a]
            idx.append(idx0[a] + bit)
        total += w * data[tuple(idx)]
    return total


def naive_warp(data: np.ndarray, disp: np.ndarray) -> np.ndarray:
    out = np.zeros_like(data)
    for idx in np.ndindex(data.shape):
        point = [idx[a] + disp[a][idx] for a in range(data.ndim)]
        out[idx] = naive_sample(data, point)
    return out


def naive_gradient(data: np.ndarray, spacing) -> np.ndarray:
    d = data.ndim
    out = np.zeros((d,) + data.shape)
    for a in range(d):
        h = spacing[a]
        n = data.shape[a]
        for idx in np.ndindex(data.shape):
            i = idx[a]
            lo = list(idx)
            hi = list(idx)
            if i == 0:
                hi[a] = 1
                out[(a,) + idx] = (data[tuple(hi)] - data[idx]) / h
            elif i == n - 1:
                lo[a] = n - 2
                out[(a,) + idx] = (data[idx] - data[tuple(lo)]) / h
            else:
                lo[a] = i - 1
                hi[a] = i + 1
                out[(a,) + idx] = (data[tuple(hi)] - data[tuple(lo)]) / (2.0 * h)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def naive_smooth_1d(data: np.ndarray, sigma: float) -> np.ndarray:
    """Clamp-to-edge convolution with the normalized sampled Gaussian."""
    if sigma == 0:
        return data.copy()
    k = gaussian_kernel(sigma)
    radius = len(k) // 2
    n = len(data)
    out = np.zeros(n)
    for i in range(n):
        for j, kv in enumerate(k):
            src = min(max(i + j - radius, 0), n - 1)
            out[i] += kv * data[src]
    return out


def naive_compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    d = outer.shape[0]
    out = np.zeros_like(inner)
    for idx in np.ndindex(inner.shape[1:]):
        point = [idx[a] + inner[a][idx] for a in range(d)]
        for c in range(d):
            out[(c,) + idx] = inner[c][idx] + naive_sample(outer[c], point)
    return out


def naive_ssd(fixed: np.ndarray, warped: np.ndarray, voxvol: float) -> float:
    total = 0.0
    for idx in np.ndindex(fixed.shape):
        total += (fixed[idx] - warped[idx]) ** 2
    return 0.5 * total * voxvol


def central_diff(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function over a flat vector."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = max(float(np.abs(exact).max()), 1e-12)
    return float(np.abs(approx - exact).max()) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
