"""Deformation solvers that drive the moving image toward a (possibly
heatmap-modified) reference: diffeomorphic demons, log-domain demons on a
stationary velocity field, and an L-BFGS minimizer of the regularized energy.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import cost
from .errors import InputError
from .grid import VectorField, Volume, compose, gaussian_smooth, gradient, min_jacobian_det, warp

__all__ = [
    "RegParams",
    "DeformationState",
    "LbfgsResult",
    "demons_force",
    "exp_field",
    "demons_iterate",
    "lbfgs_minimize",
    "lbfgs_register",
]

log = logging.getLogger(__name__)

SOLVERS = ("diffeo_demons", "log_demons", "lbfgs")

_DENOM_FLOOR = 1e-12
# per scaling level the halved field stays below this displacement, keeping
# each self-composition sub-voxel
_EXP_STEP_BOUND = 0.5


@dataclass(frozen=True)
class RegParams:
    solver: str = "diffeo_demons"
    iters: int = 10
    sigma_fluid: float = 1.0
    sigma_diffusion: float = 1.0
    lambda_reg: float = 1.0
    kappa: float = 1.0
    max_step: float = 0.5
    lbfgs_memory: int = 10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    grad_tol: float = 1e-8

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise InputError(f"unknown solver {self.solver!r}, expected one of {SOLVERS}")
        if self.iters < 0:
            raise InputError(f"iters must be >= 0, got {self.iters}")
        if self.sigma_fluid < 0 or self.sigma_diffusion < 0:
            raise InputError("smoothing sigmas must be >= 0")
        if self.lambda_reg < 0:
            raise InputError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.kappa <= 0:
            raise InputError(f"kappa must be > 0, got {self.kappa}")
        if self.max_step <= 0:
            raise InputError(f"max_step must be > 0, got {self.max_step}")
        if self.lbfgs_memory < 1:
            raise InputError(f"lbfgs_memory must be >= 1, got {self.lbfgs_memory}")
        if not 0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0:
            raise InputError(f"need 0 < c1 < c2 < 1, got c1={self.wolfe_c1}, c2={self.wolfe_c2}")


@dataclass(frozen=True)
class DeformationState:
    """Current deformation. For the log-domain solver the velocity field is
    authoritative and disp is always exp_field(velocity); otherwise disp is
    authoritative and velocity is None."""

    disp: VectorField
    velocity: VectorField | None = None
    energy_history: tuple[float, ...] = ()
    jacobian_history: tuple[float, ...] = ()
    flagged: bool = False

    @staticmethod
    def initial(dims, spacing=None, log_domain: bool = False) -> "DeformationState":
        zero = VectorField.zeros(dims, spacing)
        return DeformationState(disp=zero, velocity=zero if log_domain else None)


def demons_force(
    ref_mod: Volume, moving: Volume, disp: VectorField, kappa: float, max_step: float = 0.5
) -> VectorField:
    """Classic demons update for the squared-difference data term.

    With r = ref - M(x+u) and J the grid gradient of the warped image:
    force = r * J / (||J||^2 + kappa * r^2), zero where the denominator
    underflows, then magnitude-clamped to max_step voxels.
    """
    if kappa <= 0:
        raise InputError(f"kappa must be > 0, got {kappa}")
    warped = warp(moving, disp)
    r = ref_mod.data - warped.data
    j = gradient(warped).data
    denom = np.sum(j * j, axis=0) + kappa * r * r
    safe = denom >= _DENOM_FLOOR
    scale = np.where(safe, r / np.where(safe, denom, 1.0), 0.0)
    force = j * scale
    mag = np.sqrt(np.sum(force * force, axis=0))
    over = mag > max_step
    if np.any(over):
        force = force * np.where(over, max_step / np.where(over, mag, 1.0), 1.0)
    return VectorField(force, disp.spacing)


def exp_field(velocity: VectorField) -> VectorField:
    """Exponential of a stationary velocity field by scaling and squaring:
    halve until the largest step is sub-voxel, then self-compose."""
    vmax = float(velocity.magnitude().max())
    if vmax == 0.0:
        return VectorField(velocity.data.copy(), velocity.spacing)
    n = max(0, int(math.ceil(math.log2(vmax / _EXP_STEP_BOUND))))
    phi = velocity.with_data(velocity.data / (2.0 ** n))
    for _ in range(n):
        phi = compose(phi, phi)
    return phi


def demons_iterate(
    state: DeformationState, ref_mod: Volume, moving: Volume, params: RegParams
) -> DeformationState:
    """Run params.iters demons iterations against the (modified) reference.

    Per iteration: compute the force, fluid-smooth it, then either compose
    the displacement with its exponential (diffeomorphic variant) or add it
    to the velocity field (log-domain variant); diffusion-smooth the
    authoritative field and append the energy."""
    if params.solver not in ("diffeo_demons", "log_demons"):
        raise InputError(f"demons_iterate cannot run solver {params.solver!r}")
    log_domain = params.solver == "log_demons"
    if log_domain and state.velocity is None:
        raise InputError("log_demons needs a velocity-initialized state")
    disp = state.disp
    velocity = state.velocity
    energies = list(state.energy_history)
    jacs = list(state.jacobian_history)
    for _ in range(params.iters):
        force = demons_force(ref_mod, moving, disp, params.kappa, params.max_step)
        force = gaussian_smooth(force, params.sigma_fluid)
        if force.data.any():
            if log_domain:
                velocity = velocity.with_data(velocity.data + force.data)
                velocity = gaussian_smooth(velocity, params.sigma_diffusion)
                disp = exp_field(velocity)
            else:
                disp = compose(disp, exp_field(force))
                disp = gaussian_smooth(disp, params.sigma_diffusion)
        energies.append(cost.energy(ref_mod, _zero_like(ref_mod), moving, disp, params.lambda_reg))
        jacs.append(min_jacobian_det(disp))
    if jacs and jacs[-1] <= 0:
        log.warning("deformation folded: min Jacobian determinant %.4g", jacs[-1])
    return replace(
        state,
        disp=disp,
        velocity=velocity,
        energy_history=tuple(energies),
        jacobian_history=tuple(jacs),
    )


def _zero_like(vol: Volume) -> Volume:
    return Volume.zeros(vol.dims, vol.spacing)


# ---------------------------------------------------------------------------
# L-BFGS with a strong Wolfe line search


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad_inf_norm: float
    iterations: int
    status: str  # converged | max_iters | line_search_failed
    fun_history: list[float] = field(default_factory=list)


def _cubic_step(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi):
    """Minimizer of the cubic Hermite interpolant on [a_lo, a_hi]; NaN on a
    degenerate configuration (caller bisects)."""
    d1 = g_lo + g_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - g_lo * g_hi
    if disc < 0.0:
        return math.nan
    d2 = math.copysign(math.sqrt(disc), a_hi - a_lo)
    denom = g_hi - g_lo + 2.0 * d2
    if denom == 0.0:
        return math.nan
    return a_hi - (a_hi - a_lo) * (g_hi + d2 - d1) / denom


class _Best:
    """Lowest objective value seen across all line-search evaluations."""

    def __init__(self, f, x):
        self.f = float(f)
        self.x = x.copy()

    def offer(self, f, x):
        if f < self.f:
            self.f = float(f)
            self.x = x.copy()


def _zoom(fg, x, d, phi0, dphi0, a_lo, f_lo, g_lo, a_hi, f_hi, g_hi, c1, c2, best):
    for _ in range(50):
        a_j = _cubic_step(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        lo, hi = (a_lo, a_hi) if a_lo < a_hi else (a_hi, a_lo)
        width = hi - lo
        if not math.isfinite(a_j) or a_j < lo + 0.1 * width or a_j > hi - 0.1 * width:
            a_j = 0.5 * (lo + hi)
        xj = x + a_j * d
        f, g = fg(xj)
        best.offer(f, xj)
        dphi = float(np.dot(g, d))
        if f > phi0 + c1 * a_j * dphi0 or f >= f_lo:
            a_hi, f_hi, g_hi = a_j, f, dphi
        else:
            if abs(dphi) <= -c2 * dphi0:
                return a_j, f, g
            if dphi * (a_hi - a_lo) >= 0.0:
                a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
            a_lo, f_lo, g_lo = a_j, f, dphi
        if abs(a_hi - a_lo) <= 1e-14 * max(1.0, abs(a_lo)):
            break
    return None


def _strong_wolfe(fg, x, f0, g0, d, c1, c2):
    """Line search satisfying the strong Wolfe conditions (bracket + zoom).

    Returns (alpha, f, g) or None on failure; `best` tracks every evaluation
    so the caller can fall back to the best-seen point."""
    dphi0 = float(np.dot(g0, d))
    best = _Best(f0, x)
    if dphi0 >= 0.0:
        return None, best
    a_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    alpha = 1.0
    for i in range(30):
        xa = x + alpha * d
        f, g = fg(xa)
        best.offer(f, xa)
        dphi = float(np.dot(g, d))
        if f > f0 + c1 * alpha * dphi0 or (i > 0 and f >= f_prev):
            hit = _zoom(fg, x, d, f0, dphi0, a_prev, f_prev, dphi_prev, alpha, f, dphi, c1, c2, best)
            return hit, best
        if abs(dphi) <= -c2 * dphi0:
            return (alpha, f, g), best
        if dphi >= 0.0:
            hit = _zoom(fg, x, d, f0, dphi0, alpha, f, dphi, a_prev, f_prev, dphi_prev, c1, c2, best)
            return hit, best
        a_prev, f_prev, dphi_prev = alpha, f, dphi
        alpha *= 2.0
        if not math.isfinite(f) or alpha > 1e12:
            break
    return None, best


def lbfgs_minimize(
    objective,
    x0: np.ndarray,
    params: RegParams | None = None,
    max_iters: int = 100,
    grad_tol: float | None = None,
) -> LbfgsResult:
    """Two-loop-recursion L-BFGS over a flat parameter vector.

    `objective(x)` returns (value, gradient). Curvature pairs with
    s.y <= 1e-12 ||s|| ||y|| are discarded; a failed line search stops the
    run and the best-seen iterate is returned with a flagged status.
    """
    params = params or RegParams(solver="lbfgs")
    if grad_tol is None:
        grad_tol = params.grad_tol
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    if not np.all(np.isfinite(x)):
        raise InputError("x0 contains non-finite values")
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64).ravel()
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise InputError("objective is non-finite at x0")

    best = _Best(f, x)
    history: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=params.lbfgs_memory)
    fun_history = [f]
    status = "max_iters"
    iterations = 0
    if float(np.abs(g).max()) < grad_tol:
        return LbfgsResult(x, f, float(np.abs(g).max()), 0, "converged", fun_history)

    def two_loop(grad):
        q = grad.copy()
        alphas = []
        for s, y, rho in reversed(history):
            a = rho * float(np.dot(s, q))
            alphas.append(a)
            q -= a * y
        if history:
            s, y, _ = history[-1]
            q *= float(np.dot(s, y) / np.dot(y, y))
        for (s, y, rho), a in zip(history, reversed(alphas)):
            b = rho * float(np.dot(y, q))
            q += (a - b) * s
        return q

    for it in range(1, max_iters + 1):
        iterations = it
        d = -two_loop(g)
        if float(np.dot(d, g)) >= 0.0:
            history.clear()
            d = -g
        hit, ls_best = _strong_wolfe(objective, x, f, g, d, params.wolfe_c1, params.wolfe_c2)
        best.offer(ls_best.f, ls_best.x)
        if hit is None:
            status = "line_search_failed"
            break
        alpha, f_new, g_new = hit
        g_new = np.asarray(g_new, dtype=np.float64).ravel()
        s = alpha * d
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            history.append((s, y, 1.0 / sy))
        x = x + s
        f, g = float(f_new), g_new
        fun_history.append(f)
        best.offer(f, x)
        if float(np.abs(g).max()) < grad_tol:
            status = "converged"
            break

    return LbfgsResult(best.x, best.f, float(np.abs(g).max()), iterations, status, fun_history)


def lbfgs_register(
    state: DeformationState, ref_mod: Volume, moving: Volume, params: RegParams
) -> DeformationState:
    """Minimize the regularized energy over the displacement field with
    L-BFGS, using the analytic energy gradient."""
    if params.solver != "lbfgs":
        raise InputError(f"lbfgs_register cannot run solver {params.solver!r}")
    zero_h = _zero_like(ref_mod)
    shape = state.disp.data.shape
    spacing = state.disp.spacing

    def objective(xflat):
        disp = VectorField(xflat.reshape(shape), spacing)
        e = cost.energy(ref_mod, zero_h, moving, disp, params.lambda_reg)
        grad = cost.energy_gradient(ref_mod, zero_h, moving, disp, params.lambda_reg)
        return e, grad.data.ravel()

    result = lbfgs_minimize(objective, state.disp.data.ravel(), params, max_iters=params.iters)
    disp = VectorField(result.x.reshape(shape), spacing)
    energies = list(state.energy_history) + result.fun_history[1:]
    jacs = list(state.jacobian_history)
    if params.iters > 0:
        jacs.append(min_jacobian_det(disp))
    return replace(
        state,
        disp=disp,
        energy_history=tuple(energies),
        jacobian_history=tuple(jacs),
        flagged=state.flagged or result.status == "line_search_failed",
    )
