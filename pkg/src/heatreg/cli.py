"""Command-line interface: register image pairs, compute metrics, generate
synthetic suites, and run the paired with/without benchmark.

Exit codes: 0 success, 1 input/usage error, 2 numerical abort. Diagnostics
go to standard error; only machine-readable output goes to standard out.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import driver, metrics, runconfig, synth, volio
from .errors import HeatregError, InputError
from .grid import Volume

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="heatreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_reg = sub.add_parser("register", help="register a moving volume to a fixed volume")
    p_reg.add_argument("--fixed", required=True)
    p_reg.add_argument("--moving", required=True)
    p_reg.add_argument("--config", required=True)
    p_reg.add_argument("--out", required=True)
    p_reg.add_argument("--ddr", choices=["on", "off"], default=None)
    p_reg.add_argument("--solver", choices=["diffeo", "log", "lbfgs"], default=None)

    p_met = sub.add_parser("metrics", help="print a metrics report for two volumes as JSON")
    p_met.add_argument("--a", required=True)
    p_met.add_argument("--b", required=True)
    p_met.add_argument("--L", type=float, default=1.0)

    p_syn = sub.add_parser("synth", help="generate a synthetic fixed/moving/truth triple")
    p_syn.add_argument("--spec-file", required=True)
    p_syn.add_argument("--out", required=True)

    p_ben = sub.add_parser("bench", help="paired with/without benchmark over a seeded suite")
    p_ben.add_argument("--suite", required=True)
    p_ben.add_argument("--out", required=True)
    return parser


def _ingest(path: str):
    """Load + always normalize to [0, 1]; record enough to invert it."""
    vol, info = volio.read_volume_ex(path)
    vol, lo, hi, const = volio.normalize_volume(vol)
    record = info.to_dict()
    record.update({"ingest_min": lo, "ingest_max": hi, "ingest_constant": const, "path": str(path)})
    if const:
        print(f"warning: {path} is constant, normalized to all zeros", file=sys.stderr)
    return vol, record


def _out_suffix(input_path: str) -> str:
    suffix = Path(input_path).suffix
    return suffix if suffix == ".nii" else (suffix or ".raw")


def _cmd_register(args) -> int:
    values = runconfig.parse_config_file(args.config, runconfig.RUN_KEYS)
    if args.ddr is not None:
        values["ddr.enabled"] = args.ddr == "on"
    if args.solver is not None:
        values["reg.solver"] = runconfig.solver_name(args.solver)

    fixed, fixed_norm = _ingest(args.fixed)
    moving, moving_norm = _ingest(args.moving)
    if fixed.dims != moving.dims:
        raise InputError(f"fixed dims {fixed.dims} != moving dims {moving.dims}")
    config = runconfig.build_ddr_config(values, fixed.ndim)

    orig_dims = fixed.dims
    scale = config.net_config.scale
    fixed_p, pads = volio.pad_to_multiple(fixed, scale)
    moving_p, _ = volio.pad_to_multiple(moving, scale)

    result = driver.register(fixed_p, moving_p, config)
    if result.status == "aborted":
        print(f"numerical abort: {result.diagnostic}", file=sys.stderr)
        return 2

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = _out_suffix(args.fixed)
    warped = volio.crop_to_dims(result.warped, orig_dims)
    disp = volio.crop_to_dims(result.disp, orig_dims)
    residual = Volume(fixed.data - warped.data, fixed.spacing)

    files = {}
    volio.write_volume(warped, out / f"warped{suffix}")
    files["warped"] = f"warped{suffix}"
    written = volio.write_field(disp, out / f"disp{suffix}")
    files["disp"] = [p.name for p in written]
    if result.heatmap is not None:
        heatmap = volio.crop_to_dims(result.heatmap, orig_dims)
        volio.write_volume(heatmap, out / f"heatmap{suffix}")
        files["heatmap"] = f"heatmap{suffix}"
    volio.write_volume(residual, out / f"residual{suffix}")
    files["residual"] = f"residual{suffix}"
    volio.write_trace_csv(result.trace, out / "trace.csv")
    files["trace"] = "trace.csv"

    config_echo = {k: _echo_value(v) for k, v in sorted(values.items())}
    config_echo["padding"] = list(pads)
    volio.write_report(
        result,
        out / "report.json",
        config_echo=config_echo,
        normalization={"fixed": fixed_norm, "moving": moving_norm},
        files=files,
    )
    print(f"status={result.status} cycles={result.trace[-1].outer_iter} "
          f"final_C={result.trace[-1].C:.6g}", file=sys.stderr)
    return 0


def _echo_value(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _cmd_metrics(args) -> int:
    a = volio.read_volume(args.a)
    b = volio.read_volume(args.b)
    rep = metrics.evaluate(a, b, L=args.L)
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_synth(args) -> int:
    values = runconfig.parse_config_file(args.spec_file, runconfig.SYNTH_KEYS)
    spec = synth.SynthSpec(
        pattern=values["pattern"],
        dims=values["dims"],
        warp_amplitude=values["warp_amplitude"],
        warp_smoothness=values["warp_smoothness"],
        seed=values["seed"],
    )
    fixed, moving, truth = synth.synth_pair(spec)
    fmt = values["format"]
    suffix = ".nii" if fmt == "nifti1" else ".raw"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volio.write_volume(fixed, out / f"fixed{suffix}", fmt)
    volio.write_volume(moving, out / f"moving{suffix}", fmt)
    volio.write_field(truth, out / f"truth{suffix}", fmt)
    print(f"wrote fixed/moving/truth to {out}", file=sys.stderr)
    return 0


def _improvements(base: metrics.MetricsReport, ddr: metrics.MetricsReport) -> dict:
    return {
        "ssim": metrics.improvement_percent(base.ssim, ddr.ssim, higher_is_better=True),
        "psnr": metrics.improvement_percent(base.psnr, ddr.psnr, higher_is_better=True),
        "ssd": metrics.improvement_percent(base.mean_ssd, ddr.mean_ssd, higher_is_better=False),
    }


def run_bench(values: dict, out: Path) -> dict:
    """Run the paired with/without suite; returns the summary means."""
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(values["n_pairs"]):
        seed = values["base_seed"] + i
        spec = synth.SynthSpec(
            pattern=values["pattern"],
            dims=values["dims"],
            warp_amplitude=values["warp_amplitude"],
            warp_smoothness=values["warp_smoothness"],
            seed=seed,
        )
        fixed, moving, _ = synth.synth_pair(spec)
        config = runconfig.build_ddr_config(values, fixed.ndim)
        pair_dir = out / f"pair{i:03d}"
        pair_dir.mkdir(parents=True, exist_ok=True)

        res_ddr = driver.register(fixed, moving, replace(config, ddr_enabled=True))
        res_base = driver.register(fixed, moving, replace(config, ddr_enabled=False))
        volio.write_trace_csv(res_ddr.trace, pair_dir / "trace.csv")
        volio.write_trace_csv(res_base.trace, pair_dir / "trace_baseline.csv")

        imp = _improvements(res_base.final_metrics, res_ddr.final_metrics)
        rows.append(
            {
                "pair": i,
                "seed": seed,
                "ssd_base": res_base.final_metrics.mean_ssd,
                "ssd_ddr": res_ddr.final_metrics.mean_ssd,
                "ssim_base": res_base.final_metrics.ssim,
                "ssim_ddr": res_ddr.final_metrics.ssim,
                "psnr_base": res_base.final_metrics.psnr,
                "psnr_ddr": res_ddr.final_metrics.psnr,
                "ssim_improvement_pct": imp["ssim"],
                "psnr_improvement_pct": imp["psnr"],
                "ssd_improvement_pct": imp["ssd"],
            }
        )

    cols = list(rows[0].keys())
    means = {c: float(np.mean([r[c] for r in rows])) for c in cols if c not in ("pair", "seed")}
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(_csv_cell(r[c]) for c in cols))
    lines.append("mean,," + ",".join(_csv_cell(means[c]) for c in cols[2:]))
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    return means


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def _cmd_bench(args) -> int:
    values = runconfig.parse_config_file(args.suite, runconfig.SUITE_KEYS)
    means = run_bench(values, Path(args.out))
    print(
        f"mean improvements over {values['n_pairs']} pairs: "
        f"ssim {means['ssim_improvement_pct']:+.2f}%  "
        f"psnr {means['psnr_improvement_pct']:+.2f}%  "
        f"ssd {means['ssd_improvement_pct']:+.2f}%",
        file=sys.stderr,
    )
    return 0


_COMMANDS = {
    "register": _cmd_register,
    "metrics": _cmd_metrics,
    "synth": _cmd_synth,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except HeatregError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
