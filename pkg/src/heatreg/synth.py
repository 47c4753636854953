"""Seeded synthetic image pairs with known ground-truth deformations, the
desk-scale stand-in for real subject volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .grid import VectorField, Volume, gaussian_smooth, min_jacobian_det, warp

__all__ = ["SynthSpec", "synth_pair"]

PATTERNS = ("blobs", "checker")

_MIN_JACOBIAN = 0.1
_MAX_ATTEMPTS = 10


@dataclass(frozen=True)
class SynthSpec:
    pattern: str = "blobs"
    dims: tuple[int, ...] = (64, 64)
    warp_amplitude: float = 3.0
    warp_smoothness: float = 6.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if self.pattern not in PATTERNS:
            raise InputError(f"unknown pattern {self.pattern!r}, expected one of {PATTERNS}")
        if len(self.dims) not in (2, 3) or any(n < 8 for n in self.dims):
            raise InputError(f"dims must be 2-3 axes of >= 8 voxels, got {self.dims}")
        if self.warp_amplitude < 0:
            raise InputError(f"warp_amplitude must be >= 0, got {self.warp_amplitude}")
        if self.warp_smoothness <= 0:
            raise InputError(f"warp_smoothness must be > 0, got {self.warp_smoothness}")


def _render_blobs(rng: np.random.Generator, dims) -> np.ndarray:
    d = len(dims)
    n_blobs = 6 if d == 2 else 10
    coords = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
    img = np.zeros(dims)
    span = min(dims)
    for _ in range(n_blobs):
        center = rng.uniform(0.15, 0.85, size=d) * np.asarray(dims)
        width = rng.uniform(0.06, 0.16) * span
        amp = rng.uniform(0.4, 1.0)
        r2 = np.zeros(dims)
        for a in range(d):
            r2 += (coords[a] - center[a]) ** 2
        img += amp * np.exp(-r2 / (2.0 * width * width))
    return img


def _render_checker(rng: np.random.Generator, dims) -> np.ndarray:
    cell = max(4, min(dims) // 8)
    idx = np.indices(dims) // cell
    parity = np.sum(idx, axis=0) % 2
    img = np.where(parity == 0, 0.25, 0.85).astype(np.float64)
    # soften edges slightly so intensity gradients exist off the lattice
    return gaussian_smooth(Volume(img), 0.75).data


def _random_field(rng: np.random.Generator, dims, amplitude: float, smoothness: float) -> VectorField:
    d = len(dims)
    noise = rng.standard_normal((d,) + tuple(dims))
    field = gaussian_smooth(VectorField(noise), smoothness)
    mag = field.magnitude().max()
    if mag > 0:
        field = field.with_data(field.data * (amplitude / mag))
    return field


def synth_pair(spec: SynthSpec) -> tuple[Volume, Volume, VectorField]:
    """Render (fixed, moving, truth): moving = warp(fixed, truth).

    The ground-truth field is a smoothed seeded random field rescaled to the
    requested amplitude, resampled until its minimum Jacobian determinant
    exceeds 0.1 (up to 10 attempts, then rejected). Deterministic per seed.
    """
    rng = np.random.default_rng(spec.seed)
    render = _render_blobs if spec.pattern == "blobs" else _render_checker
    img = render(rng, spec.dims)
    lo, hi = img.min(), img.max()
    fixed = Volume((img - lo) / (hi - lo) if hi > lo else np.zeros(spec.dims))

    if spec.warp_amplitude == 0:
        truth = VectorField.zeros(spec.dims)
    else:
        truth = None
        for _ in range(_MAX_ATTEMPTS):
            cand = _random_field(rng, spec.dims, spec.warp_amplitude, spec.warp_smoothness)
            if min_jacobian_det(cand) > _MIN_JACOBIAN:
                truth = cand
                break
        if truth is None:
            raise InputError(
                f"could not draw a field with min Jacobian det > {_MIN_JACOBIAN} "
                f"at amplitude {spec.warp_amplitude}, smoothness {spec.warp_smoothness}; "
                "lower the amplitude or raise the smoothness"
            )
    moving = warp(fixed, truth)
    return fixed, moving, truth
