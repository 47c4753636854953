"""Coordinate-descent orchestration: alternate (a) deformation optimization
against the heatmap-modified reference and (b) heatmap/network updates with
the deformation frozen, refitting the soft threshold each cycle so the
surrogate cost stays a tight upper bound on the plain cost.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import bound, cost, fcnn, metrics
from .errors import InputError
from .grid import Volume, VectorField, warp
from .registration import DeformationState, RegParams, demons_iterate, lbfgs_register

__all__ = [
    "DdrConfig",
    "TraceRecord",
    "RegistrationResult",
    "DriverState",
    "register",
    "outer_step",
    "convergence_check",
]

_EPS_FLOOR = 1e-300


@dataclass(frozen=True)
class DdrConfig:
    """Knobs of the outer loop. ddr_enabled=False runs the plain solver with
    an untouched reference (the paired baseline)."""

    outer_iters: int = 20
    n_fcnn_steps: int = 5
    reg_params: RegParams = field(default_factory=RegParams)
    net_config: fcnn.NetworkConfig = field(default_factory=fcnn.NetworkConfig)
    epsilon_rel: float = 1e-3
    stepsize_rel: float = 1e-3
    rel_tol: float = 1e-4
    ddr_enabled: bool = True
    fcnn_lr: float = 1e-2
    fcnn_momentum: float = 0.9
    fcnn_clip_norm: float = 1.0
    trace_metrics: bool = False

    def __post_init__(self):
        if self.outer_iters < 1:
            raise InputError(f"outer_iters must be >= 1, got {self.outer_iters}")
        if self.n_fcnn_steps < 0:
            raise InputError(f"n_fcnn_steps must be >= 0, got {self.n_fcnn_steps}")
        for name in ("epsilon_rel", "stepsize_rel", "rel_tol"):
            v = getattr(self, name)
            if v <= 0 or not math.isfinite(v):
                raise InputError(f"{name} must be > 0, got {v}")


@dataclass(frozen=True)
class TraceRecord:
    """One Fig.-style trace row: plain cost, surrogate cost, threshold, gap."""

    outer_iter: int
    C: float
    C_U: float
    t: float
    gap: float
    metrics_snapshot: metrics.MetricsReport | None = None


@dataclass(frozen=True)
class RegistrationResult:
    disp: VectorField
    warped: Volume
    heatmap: Volume | None
    trace: tuple[TraceRecord, ...]
    final_metrics: metrics.MetricsReport
    status: str  # converged | max_iters | solver_flagged | aborted
    diagnostic: str = ""


@dataclass(frozen=True)
class DriverState:
    """Everything one outer cycle consumes and produces."""

    cycle: int
    reg: DeformationState
    net: fcnn.Network | None
    heat_mod: Volume
    bound_state: bound.BoundState | None
    trace: tuple[TraceRecord, ...]


def convergence_check(trace, rel_tol: float) -> bool:
    """True when the plain cost dropped by less than rel_tol (relative) over
    the last cycle."""
    if len(trace) < 2:
        raise InputError("convergence_check needs at least 2 trace records")
    c_prev = trace[-2].C
    c_curr = trace[-1].C
    return (c_prev - c_curr) / max(c_prev, 1e-30) < rel_tol


def _network_input(config: DdrConfig, fixed: Volume, warped: Volume) -> np.ndarray:
    if config.net_config.in_channels == 1:
        return fixed.data[None]
    return np.stack([fixed.data, warped.data])


def _run_solver(state: DeformationState, ref_mod: Volume, moving: Volume, params: RegParams) -> DeformationState:
    if params.solver == "lbfgs":
        return lbfgs_register(state, ref_mod, moving, params)
    return demons_iterate(state, ref_mod, moving, params)


def _trace_record(
    config: DdrConfig,
    cycle: int,
    fixed: Volume,
    warped: Volume,
    heat_mod: Volume,
    bound_state: bound.BoundState | None,
) -> TraceRecord:
    c = cost.ssd(fixed, warped)
    cu = cost.ub_ssd(fixed, heat_mod, warped)
    snapshot = metrics.evaluate(fixed, warped) if config.trace_metrics else None
    return TraceRecord(
        outer_iter=cycle,
        C=c,
        C_U=cu,
        t=bound_state.t if bound_state is not None else 0.0,
        gap=cu - c,
        metrics_snapshot=snapshot,
    )


def outer_step(state: DriverState, fixed: Volume, moving: Volume, config: DdrConfig) -> DriverState:
    """One (a)+(b) coordinate-descent cycle; pure given its inputs.

    (a) run the configured solver against fixed + heat_mod with the heatmap
    frozen; (b) take n_fcnn_steps gradient steps on the network against the
    frozen deformation, then refit the threshold and rebuild heat_mod.
    Appends exactly one trace record.
    """
    cycle = state.cycle + 1
    reg = state.reg
    net = state.net
    heat_mod = state.heat_mod
    bound_state = state.bound_state

    if config.reg_params.iters > 0:
        if config.ddr_enabled and heat_mod.data.any():
            ref_mod = fixed.with_data(fixed.data + heat_mod.data)
        else:
            ref_mod = fixed
        reg = _run_solver(reg, ref_mod, moving, config.reg_params)

    warped = warp(moving, reg.disp)

    if config.ddr_enabled and config.n_fcnn_steps > 0:
        net_input = _network_input(config, fixed, warped)
        t_cur = bound_state.t if bound_state is not None else 0.0
        voxvol = fixed.voxel_volume
        for _ in range(config.n_fcnn_steps):
            h_data, cache = fcnn.forward(net, net_input)
            h = fixed.with_data(h_data)
            h_m = bound.soft_threshold(h, t_cur)
            a1 = cost.alpha1(fixed, h_m, warped)
            a2 = bound.alpha2(h, t_cur, a1)
            grads = fcnn.backward(net, cache, a2.data, voxvol)
            net = fcnn.sgd_step(net, grads, config.fcnn_lr, config.fcnn_momentum, config.fcnn_clip_norm)
        h_data, _ = fcnn.forward(net, net_input)
        h = fixed.with_data(h_data)
        hmax = float(np.abs(h.data).max())
        epsilon = config.epsilon_rel * cost.ssd(fixed, warped) + _EPS_FLOOR
        stepsize = config.stepsize_rel * hmax if hmax > 0 else 1.0
        bound_state = bound.BoundState.fit(h, fixed, warped, epsilon, stepsize)
        heat_mod = bound.soft_threshold(h, bound_state.t)

    record = _trace_record(config, cycle, fixed, warped, heat_mod, bound_state)
    return DriverState(
        cycle=cycle,
        reg=reg,
        net=net,
        heat_mod=heat_mod,
        bound_state=bound_state,
        trace=state.trace + (record,),
    )


def register(fixed: Volume, moving: Volume, config: DdrConfig | None = None) -> RegistrationResult:
    """Register `moving` to `fixed` (both normalized to [0, 1]).

    With ddr_enabled the reference is additively perturbed each cycle by the
    thresholded network heatmap; the surrogate cost then upper-bounds the
    plain cost within the fitted tolerance at every trace record. Without it
    this is the plain configured solver, and no network is ever built.
    """
    config = config or DdrConfig()
    if tuple(fixed.dims) != tuple(moving.dims):
        raise InputError(f"register: fixed dims {fixed.dims} != moving dims {moving.dims}")
    lo = min(float(fixed.data.min()), float(moving.data.min()))
    hi = max(float(fixed.data.max()), float(moving.data.max()))
    if lo < -1e-9 or hi > 1.0 + 1e-9:
        raise InputError(f"register expects intensities in [0, 1], got range [{lo:g}, {hi:g}]")

    net = None
    if config.ddr_enabled:
        if config.net_config.spatial_rank != fixed.ndim:
            raise InputError(
                f"network spatial_rank {config.net_config.spatial_rank} != volume rank {fixed.ndim}"
            )
        scale = config.net_config.scale
        if any(n % scale != 0 for n in fixed.dims):
            raise InputError(f"dims {fixed.dims} must be divisible by {scale}; pad at ingestion")
        net = fcnn.build_network(config.net_config)

    log_domain = config.reg_params.solver == "log_demons"
    state = DriverState(
        cycle=0,
        reg=DeformationState.initial(fixed.dims, fixed.spacing, log_domain=log_domain),
        net=net,
        heat_mod=Volume.zeros(fixed.dims, fixed.spacing),
        bound_state=None,
        trace=(),
    )
    warped0 = warp(moving, state.reg.disp)
    state = replace(
        state, trace=(_trace_record(config, 0, fixed, warped0, state.heat_mod, None),)
    )

    status = "max_iters"
    diagnostic = ""
    for _ in range(config.outer_iters):
        state = outer_step(state, fixed, moving, config)
        last = state.trace[-1]
        if not (math.isfinite(last.C) and math.isfinite(last.C_U)):
            status = "aborted"
            diagnostic = f"non-finite cost at cycle {state.cycle}: C={last.C}, C_U={last.C_U}"
            break
        if convergence_check(state.trace, config.rel_tol):
            status = "converged"
            break
    if status != "aborted" and state.reg.flagged:
        status = "solver_flagged"

    warped = warp(moving, state.reg.disp)
    final_metrics = metrics.evaluate(fixed, warped)
    return RegistrationResult(
        disp=state.reg.disp,
        warped=warped,
        heatmap=state.heat_mod if config.ddr_enabled else None,
        trace=state.trace,
        final_metrics=final_metrics,
        status=status,
        diagnostic=diagnostic,
    )
