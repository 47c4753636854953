"""Scalar volumes and vector fields on regular grids, with the resampling,
differencing, and smoothing primitives everything else is built on.

Conventions: grids are 1-3 dimensional, stored row-major (last axis fastest);
displacement and velocity fields are in voxel units, one component per
spatial axis, component-first layout ``(d, *dims)``. All out-of-grid access
clamps to the edge.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InputError

__all__ = [
    "Volume",
    "VectorField",
    "sample_linear",
    "warp",
    "gradient",
    "gaussian_smooth",
    "compose",
    "min_jacobian_det",
]

_MAX_RANK = 3


def _check_spacing(spacing, ndim: int) -> tuple[float, ...]:
    if spacing is None:
        return (1.0,) * ndim
    if np.isscalar(spacing):
        spacing = (float(spacing),) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise InputError(f"spacing has {len(spacing)} entries for a {ndim}-axis grid")
    if any(s <= 0 or not math.isfinite(s) for s in spacing):
        raise InputError(f"spacing must be positive and finite, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False, repr=False)
class Volume:
    """A scalar grid with per-axis voxel spacing.

    ``data`` is float64 with shape ``dims``; values are always finite.
    """

    data: np.ndarray
    spacing: tuple[float, ...]

    def __init__(self, data, spacing=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim < 1 or data.ndim > _MAX_RANK:
            raise InputError(f"volume must have 1-{_MAX_RANK} axes, got {data.ndim}")
        if data.size == 0:
            raise InputError("volume has a zero-length axis")
        if not np.all(np.isfinite(data)):
            raise InputError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(spacing, data.ndim))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)

    @staticmethod
    def zeros(dims, spacing=None) -> "Volume":
        return Volume(np.zeros(tuple(dims)), spacing)

    def __repr__(self) -> str:
        return f"Volume(dims={self.dims}, spacing={self.spacing})"


@dataclass(frozen=True, eq=False, repr=False)
class VectorField:
    """A grid of d-component vectors in voxel units, layout ``(d, *dims)``."""

    data: np.ndarray
    spacing: tuple[float, ...]

    def __init__(self, data, spacing=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim < 2 or data.ndim - 1 > _MAX_RANK:
            raise InputError(f"vector field must be (d, *dims) with 1-{_MAX_RANK} spatial axes")
        if data.shape[0] != data.ndim - 1:
            raise InputError(
                f"vector field has {data.shape[0]} components for {data.ndim - 1} spatial axes"
            )
        if data.size == 0:
            raise InputError("vector field has a zero-length axis")
        if not np.all(np.isfinite(data)):
            raise InputError("vector field contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(spacing, data.ndim - 1))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def ndim(self) -> int:
        return self.data.ndim - 1

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def with_data(self, data) -> "VectorField":
        return VectorField(data, self.spacing)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.data * self.data, axis=0))

    @staticmethod
    def zeros(dims, spacing=None) -> "VectorField":
        dims = tuple(dims)
        return VectorField(np.zeros((len(dims),) + dims), spacing)

    def __repr__(self) -> str:
        return f"VectorField(dims={self.dims}, spacing={self.spacing})"


def _require_same_dims(a_dims, b_dims, what: str) -> None:
    if tuple(a_dims) != tuple(b_dims):
        raise InputError(f"{what}: grid dims {tuple(a_dims)} != {tuple(b_dims)}")


def _grid_coords(dims) -> np.ndarray:
    """Voxel-index coordinates of every grid point, shape (d, N)."""
    return np.stack(
        [g.ravel() for g in np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")]
    )


def _clamped_cells(data: np.ndarray, coords: np.ndarray):
    """Clamp coords to the grid and split into base cell index and fraction.

    Returns (idx0, frac) as lists of per-axis arrays; idx0 is capped at n-2 so
    the +1 corner stays in bounds (points at the far edge use the last cell).
    """
    idx0, frac = [], []
    for a, n in enumerate(data.shape):
        c = np.clip(coords[a], 0.0, n - 1.0)
        if n == 1:
            i0 = np.zeros(c.shape, dtype=np.intp)
            f = np.zeros_like(c)
        else:
            i0 = np.floor(c).astype(np.intp)
            np.minimum(i0, n - 2, out=i0)
            f = c - i0
        idx0.append(i0)
        frac.append(f)
    return idx0, frac


def _sample_values(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of `data` at voxel coordinates (d, N)."""
    idx0, frac = _clamped_cells(data, coords)
    out = np.zeros(coords.shape[1])
    for corner in itertools.product((0, 1), repeat=data.ndim):
        w = np.ones(coords.shape[1])
        idx = []
        for a, bit in enumerate(corner):
            w = w * (frac[a] if bit else (1.0 - frac[a]))
            idx.append(idx0[a] + bit)
        out += w * data[tuple(idx)]
    return out


def _sample_with_grad(data: np.ndarray, coords: np.ndarray):
    """Interpolated values and the exact derivative of the clamped multilinear
    interpolant with respect to each (voxel-unit) query coordinate.

    The derivative is zero along axes where the query point is clamped.
    """
    idx0, frac = _clamped_cells(data, coords)
    d = data.ndim
    n_pts = coords.shape[1]
    vals = np.zeros(n_pts)
    grads = np.zeros((d, n_pts))
    inside = [
        (coords[a] > 0.0) & (coords[a] < data.shape[a] - 1.0) if data.shape[a] > 1
        else np.zeros(n_pts, dtype=bool)
        for a in range(d)
    ]
    for corner in itertools.product((0, 1), repeat=d):
        w_axis = [frac[a] if bit else (1.0 - frac[a]) for a, bit in enumerate(corner)]
        idx = tuple(idx0[a] + bit for a, bit in enumerate(corner))
        v = data[idx]
        w = np.ones(n_pts)
        for wa in w_axis:
            w = w * wa
        vals += w * v
        for a, bit in enumerate(corner):
            dw = np.ones(n_pts)
            for a2, wa in enumerate(w_axis):
                if a2 != a:
                    dw = dw * wa
            sign = 1.0 if bit else -1.0
            grads[a] += sign * dw * v * inside[a]
    return vals, grads


def sample_linear(vol: Volume, point) -> float:
    """Multilinear interpolation of `vol` at a single point (voxel units).

    Coordinates outside the grid clamp to the boundary, so every point is
    valid and the result lies within [min(vol), max(vol)].
    """
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    if point.shape[0] != vol.ndim:
        raise InputError(f"point has {point.shape[0]} coordinates for a {vol.ndim}-axis volume")
    return float(_sample_values(vol.data, point[:, None])[0])


def warp(vol: Volume, disp: VectorField) -> Volume:
    """Resample `vol` at x + disp(x): the backward warp M(T(x)) with T = id + u."""
    _require_same_dims(vol.dims, disp.dims, "warp")
    if not disp.data.any():
        return Volume(vol.data.copy(), vol.spacing)
    coords = _grid_coords(vol.dims) + disp.data.reshape(vol.ndim, -1)
    out = _sample_values(vol.data, coords)
    return Volume(out.reshape(vol.dims), vol.spacing)


def gradient(vol: Volume) -> VectorField:
    """Finite-difference gradient: central in the interior, one-sided at the
    boundary, scaled by 1/spacing per axis. Exact for linear ramps."""
    if any(n < 2 for n in vol.dims):
        raise InputError(f"gradient needs every axis >= 2 voxels, got dims {vol.dims}")
    parts = [np.gradient(vol.data, vol.spacing[a], axis=a, edge_order=1) for a in range(vol.ndim)]
    return VectorField(np.stack(parts), vol.spacing)


def _axis_diff(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Same stencil as `gradient` along one axis (no Volume wrapper)."""
    return np.gradient(arr, h, axis=axis, edge_order=1)


def _axis_diff_adjoint(v: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Exact adjoint of `_axis_diff`, needed for gradients of ||grad u||^2."""
    v = np.moveaxis(v, axis, 0)
    n = v.shape[0]
    out = np.zeros_like(v)
    if n == 1:
        return np.moveaxis(out, 0, axis)
    # boundary rows use one-sided differences (u[1]-u[0])/h and (u[-1]-u[-2])/h
    out[0] -= v[0] / h
    out[1] += v[0] / h
    out[-2] -= v[-1] / h
    out[-1] += v[-1] / h
    if n > 2:
        # interior rows i contribute +/- v[i]/(2h) to columns i+1 / i-1
        out[0 : n - 2] -= v[1 : n - 1] / (2.0 * h)
        out[2:n] += v[1 : n - 1] / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def gaussian_smooth(field, sigma):
    """Separable Gaussian smoothing of a Volume or VectorField.

    Kernel radius is ceil(3*sigma) per axis, sampled Gaussian normalized to
    sum 1, boundary clamp-to-edge. sigma may be a scalar or per-axis; zero
    sigma is the identity.
    """
    ndim = field.ndim
    if np.isscalar(sigma):
        sigmas = (float(sigma),) * ndim
    else:
        sigmas = tuple(float(s) for s in sigma)
        if len(sigmas) != ndim:
            raise InputError(f"sigma has {len(sigmas)} entries for {ndim} axes")
    if any(s < 0 or not math.isfinite(s) for s in sigmas):
        raise InputError(f"sigma must be >= 0 and finite, got {sigmas}")
    if all(s == 0.0 for s in sigmas):
        return field

    def smooth_one(arr):
        out = arr
        for a, s in enumerate(sigmas):
            if s > 0.0:
                out = ndimage.gaussian_filter1d(
                    out, s, axis=a, mode="nearest", radius=int(math.ceil(3.0 * s))
                )
        return out

    if isinstance(field, VectorField):
        return field.with_data(np.stack([smooth_one(c) for c in field.data]))
    return field.with_data(smooth_one(field.data))


def compose(outer: VectorField, inner: VectorField) -> VectorField:
    """Displacement of (id + outer) o (id + inner):
    result(x) = inner(x) + outer(x + inner(x)), sampled multilinearly."""
    _require_same_dims(outer.dims, inner.dims, "compose")
    if not inner.data.any():
        return VectorField(outer.data.copy(), outer.spacing)
    if not outer.data.any():
        return VectorField(inner.data.copy(), inner.spacing)
    d = inner.ndim
    coords = _grid_coords(inner.dims) + inner.data.reshape(d, -1)
    sampled = np.stack([_sample_values(outer.data[c], coords) for c in range(d)])
    return inner.with_data(inner.data + sampled.reshape(inner.data.shape))


def min_jacobian_det(disp: VectorField) -> float:
    """Minimum over voxels of det(I + du/dx), differences in voxel units.

    A positive minimum indicates the mapping id + disp is locally invertible.
    """
    if any(n < 2 for n in disp.dims):
        raise InputError(f"min_jacobian_det needs every axis >= 2 voxels, got dims {disp.dims}")
    d = disp.ndim
    jac = np.empty(disp.dims + (d, d))
    for c in range(d):
        for a in range(d):
            jac[..., c, a] = np.gradient(disp.data[c], axis=a, edge_order=1)
        jac[..., c, c] += 1.0
    return float(np.linalg.det(jac).min())
