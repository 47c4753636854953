"""Flat ``dotted.key=value`` run configuration with a closed key registry:
unknown keys are errors, every key has a documented default."""
from __future__ import annotations

from pathlib import Path

from . import fcnn
from .driver import DdrConfig
from .errors import InputError
from .registration import RegParams

__all__ = [
    "RUN_KEYS",
    "SYNTH_KEYS",
    "SUITE_KEYS",
    "parse_config_text",
    "parse_config_file",
    "build_ddr_config",
    "solver_name",
]

_SOLVER_ALIASES = {
    "diffeo": "diffeo_demons",
    "diffeo_demons": "diffeo_demons",
    "log": "log_demons",
    "log_demons": "log_demons",
    "lbfgs": "lbfgs",
}


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "on", "yes", "1"):
        return True
    if t in ("false", "off", "no", "0"):
        return False
    raise InputError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    t = text.strip()
    if not t:
        return ()
    return tuple(int(v) for v in t.split(","))


def solver_name(text: str) -> str:
    t = text.strip().lower()
    if t not in _SOLVER_ALIASES:
        raise InputError(f"unknown solver {text!r}, expected diffeo|log|lbfgs")
    return _SOLVER_ALIASES[t]


def _pattern(text: str) -> str:
    t = text.strip().lower()
    if t not in ("blobs", "checker"):
        raise InputError(f"unknown pattern {text!r}, expected blobs|checker")
    return t


def _fmt(text: str) -> str:
    t = text.strip().lower()
    if t not in ("raw", "nifti1"):
        raise InputError(f"unknown format {text!r}, expected raw|nifti1")
    return t


# key -> (default, parser); defaults double as the documentation of record
RUN_KEYS = {
    "ddr.enabled": (True, _bool),
    "ddr.outer_iters": (20, int),
    "ddr.n_fcnn_steps": (5, int),
    "ddr.epsilon_rel": (1e-3, float),
    "ddr.stepsize_rel": (1e-3, float),
    "ddr.rel_tol": (1e-4, float),
    "ddr.trace_metrics": (False, _bool),
    "fcnn.lr": (1e-2, float),
    "fcnn.momentum": (0.9, float),
    "fcnn.clip_norm": (1.0, float),
    "net.stages": (2, int),
    "net.channels": ((8, 16), _int_list),
    "net.skip_links": ((1,), _int_list),
    "net.kernel_size": (3, int),
    "net.in_channels": (2, int),
    "net.seed": (0, int),
    "reg.solver": ("diffeo_demons", solver_name),
    "reg.iters": (10, int),
    "reg.sigma_fluid": (1.0, float),
    "reg.sigma_diffusion": (1.0, float),
    "reg.lambda": (1.0, float),
    "reg.kappa": (1.0, float),
    "reg.max_step": (0.5, float),
    "reg.lbfgs_memory": (10, int),
    "reg.wolfe_c1": (1e-4, float),
    "reg.wolfe_c2": (0.9, float),
    "reg.grad_tol": (1e-8, float),
    "metrics.L": (1.0, float),
    "metrics.ssim_sigma": (1.5, float),
}

SYNTH_KEYS = {
    "pattern": ("blobs", _pattern),
    "dims": ((64, 64), _int_list),
    "warp_amplitude": (3.0, float),
    "warp_smoothness": (6.0, float),
    "seed": (0, int),
    "format": ("raw", _fmt),
}

_SUITE_ONLY = {
    "n_pairs": (10, int),
    "pattern": ("blobs", _pattern),
    "dims": ((64, 64), _int_list),
    "warp_amplitude": (3.0, float),
    "warp_smoothness": (6.0, float),
    "base_seed": (1000, int),
}
SUITE_KEYS = {**RUN_KEYS, **_SUITE_ONLY}


def parse_config_text(text: str, registry: dict, source: str = "<config>") -> dict:
    """Parse ``key=value`` lines against a registry; returns the full map
    with defaults filled in. Unknown keys and bad values are errors."""
    values = {k: d for k, (d, _) in registry.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in registry:
            raise InputError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise InputError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        _, parser = registry[key]
        try:
            values[key] = parser(val)
        except InputError:
            raise
        except (ValueError, TypeError) as exc:
            raise InputError(f"{source}:{lineno}: bad value for {key!r}: {exc}")
    return values


def parse_config_file(path, registry: dict) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), registry, source=str(path))


def build_ddr_config(values: dict, spatial_rank: int) -> DdrConfig:
    """Materialize a DdrConfig (with nested solver and network configs) from
    a parsed run-config map."""
    reg = RegParams(
        solver=values["reg.solver"],
        iters=values["reg.iters"],
        sigma_fluid=values["reg.sigma_fluid"],
        sigma_diffusion=values["reg.sigma_diffusion"],
        lambda_reg=values["reg.lambda"],
        kappa=values["reg.kappa"],
        max_step=values["reg.max_step"],
        lbfgs_memory=values["reg.lbfgs_memory"],
        wolfe_c1=values["reg.wolfe_c1"],
        wolfe_c2=values["reg.wolfe_c2"],
        grad_tol=values["reg.grad_tol"],
    )
    net = fcnn.NetworkConfig(
        spatial_rank=spatial_rank,
        in_channels=values["net.in_channels"],
        stages=values["net.stages"],
        channels_per_stage=tuple(values["net.channels"]),
        skip_links=frozenset(values["net.skip_links"]),
        kernel_size=values["net.kernel_size"],
        seed=values["net.seed"],
    )
    return DdrConfig(
        outer_iters=values["ddr.outer_iters"],
        n_fcnn_steps=values["ddr.n_fcnn_steps"],
        reg_params=reg,
        net_config=net,
        epsilon_rel=values["ddr.epsilon_rel"],
        stepsize_rel=values["ddr.stepsize_rel"],
        rel_tol=values["ddr.rel_tol"],
        ddr_enabled=values["ddr.enabled"],
        fcnn_lr=values["fcnn.lr"],
        fcnn_momentum=values["fcnn.momentum"],
        fcnn_clip_norm=values["fcnn.clip_norm"],
        trace_metrics=values["ddr.trace_metrics"],
    )
