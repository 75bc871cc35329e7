"""Command-line interface.

Every subcommand reads a JSON config, runs deterministically from the given
seed, and writes a CSV data file, a JSON report and a JSON run manifest into
--out-dir.  Outputs carry no timestamps: identical config + seed reproduces
identical bytes.  Harness subcommands exit 0 iff all verdicts pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__, fractional, pde, sde, simulator
from .config import config_hash, load_model, require_keys
from .harness import (ConvergeConfig, EscapeConfig, MomentConfig, QvConfig,
                      converge_deterministic, mass_escape_check,
                      moment_bound_check, superprocess_qv)
from .model import (PointMeasure, UnaryRate, constant_one, default_dictionary,
                    gaussian_bump, sinusoid)

_FN_PATTERN = re.compile(r"^(one|bump|sin|cutoff)(?:\(([^)]*)\))?$")


def parse_test_function(spec: str):
    """one | bump(center,width) | sin(k) | cutoff(n)"""
    m = _FN_PATTERN.match(spec.strip())
    if not m:
        raise ValueError(f"cannot parse test function {spec!r}")
    name, args = m.group(1), m.group(2)
    vals = [float(a) for a in args.split(",")] if args else []
    if name == "one":
        return constant_one()
    if name == "bump":
        center, width = (vals + [0.0, 1.0])[:2] if vals else (0.0, 1.0)
        return gaussian_bump(center, width)
    if name == "sin":
        return sinusoid(vals[0] if vals else 1.0)
    return fractional.cutoff_test_function(int(vals[0]))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _manifest(args_ns, cfg_obj, extra=None):
    man = {
        "command": args_ns.command,
        "package_version": __version__,
        "config_hash": config_hash(cfg_obj),
    }
    if extra:
        man.update(extra)
    return man


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    doc = _load_config(args.config)
    params = load_model(doc)
    out_times = [float(t) for t in args.output_times]
    dictionary = default_dictionary()
    nu0 = PointMeasure.dirac(args.x0, int(round(params.K * args.initial_mass)), params.K)
    stats = simulator.ensemble_run(params, nu0, args.T, out_times,
                                   args.replicas, args.seed, dictionary)
    rows = []
    for rep in range(stats.n_replicas):
        for ti, t in enumerate(stats.times):
            for fi, name in enumerate(stats.f_names):
                rows.append([rep, repr(float(t)), name, repr(float(stats.values[rep, ti, fi]))])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "simulate.csv", ["replica", "time", "statistic_name", "value"], rows)
    _write_json(out / "simulate_manifest.json", _manifest(args, doc, {
        "seed": args.seed,
        "replicas": args.replicas,
        "T": args.T,
        "event_counts": [int(c) for c in stats.event_counts],
        "extinct": [bool(e) for e in stats.extinct],
    }))
    return 0


def _cmd_verify_kernel(args) -> int:
    doc = _load_config(args.config)
    params = load_model(doc)
    f = parse_test_function(args.function)
    xs = np.linspace(args.x_lo, args.x_hi, args.x_points)
    rows = []
    sups = []
    for K in args.K_list:
        sup, _ = fractional.kernel_limit_error(params.kernel, f, xs, int(K), params.eta)
        sups.append(sup)
        rows.append([int(K), repr(sup)])
    monotone = all(b < a for a, b in zip(sups, sups[1:]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "verify_kernel.csv", ["K", "sup_error"], rows)
    _write_json(out / "verify_kernel_report.json", {
        "K_list": [int(K) for K in args.K_list],
        "sup_errors": sups,
        "function": args.function,
        "monotone_decreasing": monotone,
        "verdict": "pass" if monotone else "fail",
    })
    _write_json(out / "verify_kernel_manifest.json", _manifest(args, doc, {
        "eta": params.eta, "alpha": params.alpha}))
    return 0 if monotone else 1


def _cmd_masscontrol(args) -> int:
    reports = []
    ok = True
    for n in args.n_list:
        grid = np.linspace(-(n - 1) * 0.95, (n - 1) * 0.95, args.x_points)
        rep = fractional.mass_control_bound_check(int(n), args.alpha, grid)
        ok = ok and rep["passed"]
        reports.append({
            "n": int(n),
            "alpha": args.alpha,
            "max_abs_value": rep["max_abs_value"],
            "global_bound": rep["global_bound"],
            "local_ok": rep["local_ok"],
            "global_ok": rep["global_ok"],
            "passed": rep["passed"],
            "failures": rep["failures"],
        })
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "masscontrol_report.json", {
        "alpha": args.alpha,
        "checks": reports,
        "verdict": "pass" if ok else "fail",
    })
    _write_json(out / "masscontrol_manifest.json", _manifest(
        args, {"n_list": args.n_list, "alpha": args.alpha}))
    return 0 if ok else 1


def _cmd_pde(args) -> int:
    doc = _load_config(args.config)
    require_keys(doc, ("model", "grid", "T", "output_times"), optional=("dt",),
                 where="pde config")
    params = load_model(doc["model"])
    from .harness import _grid_from_dict
    xi0 = _grid_from_dict(doc["grid"])
    run = pde.solve(xi0, params, float(doc["T"]), doc.get("dt"),
                    [float(t) for t in doc["output_times"]])
    rows = []
    grid = run.final.grid
    for ti, t in enumerate(run.times):
        for xi_pt, v in zip(grid, run.frames[ti]):
            rows.append([repr(float(t)), repr(float(xi_pt)), repr(float(v))])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "pde.csv", ["time", "x", "value"], rows)
    _write_json(out / "pde_report.json",
                {k: float(v) for k, v in run.diagnostics.items()})
    _write_json(out / "pde_manifest.json", _manifest(args, doc))
    return 0


def _cmd_sde(args) -> int:
    scheme = sde.JumpSchemeSpec(epsilon_cut=args.epsilon,
                                small_jump_mode=args.small_jumps,
                                dt_max=args.dt_max)
    sigma = UnaryRate("constant", {"value": args.sigma_hat})
    rng = np.random.default_rng(args.seed)
    x_T, counts = sde.terminal_values(np.full(args.paths, args.x0), sigma,
                                      args.alpha, args.T, scheme, rng)
    lam = sde.large_jump_rate(args.alpha, args.epsilon)
    mean = float(x_T.mean())
    se = float(x_T.std(ddof=1) / np.sqrt(args.paths))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sde.csv", ["path", "x_T", "jumps"],
               [[i, repr(float(x)), int(c)] for i, (x, c) in enumerate(zip(x_T, counts))])
    _write_json(out / "sde_report.json", {
        "x0": args.x0,
        "mean_terminal": mean,
        "std_error": se,
        "martingale_z": (mean - args.x0) / se if se > 0 else 0.0,
        "jump_rate": lam,
        "mean_jump_count": float(counts.mean()),
        "expected_jump_count": lam * args.T,
    })
    _write_json(out / "sde_manifest.json", _manifest(args, {
        "x0": args.x0, "sigma_hat": args.sigma_hat, "alpha": args.alpha,
        "T": args.T, "epsilon": args.epsilon, "paths": args.paths,
        "seed": args.seed}))
    return 0


def _cmd_mild_check(args) -> int:
    doc = _load_config(args.config)
    require_keys(doc, ("model", "grid", "T", "output_times"), optional=("dt",),
                 where="pde config")
    params = load_model(doc["model"])
    from .harness import _grid_from_dict
    xi0 = _grid_from_dict(doc["grid"])
    run = pde.solve(xi0, params, float(doc["T"]), doc.get("dt"),
                    [float(t) for t in doc["output_times"]])
    f = parse_test_function(args.function)
    scheme = sde.JumpSchemeSpec(epsilon_cut=args.epsilon, dt_max=args.dt_max)
    res, mc, notes = sde.mild_residual(run, f, float(doc["T"]), scheme,
                                       args.paths, args.seed)
    budget = mc + notes["far_drop_bound"]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "mild_report.json", {
        "residual": res,
        "mc_bracket": mc,
        "far_drop_bound": notes["far_drop_bound"],
        "budget": budget,
        "lhs": notes["lhs"],
        "rhs": notes["rhs"],
        "verdict": "pass" if res < budget else "fail",
    })
    _write_json(out / "mild_manifest.json", _manifest(args, doc, {
        "seed": args.seed, "paths": args.paths}))
    return 0 if res < budget else 1


def _run_harness(args, loader, runner, name: str) -> int:
    cfg = loader(_load_config(args.config))
    report = runner(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header, rows = report.csv_rows()
    _write_csv(out / f"{name}.csv", header, rows)
    _write_json(out / f"{name}_report.json", report.to_json_dict())
    _write_json(out / f"{name}_manifest.json", _manifest(args, cfg.model, {
        "base_seed": cfg.base_seed, "verdict": report.verdict}))
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="levypop",
        description="Heavy-tail birth-death-mutation-competition simulations "
                    "and their fractional scaling limits.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="particle ensemble, dictionary statistics CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--output-times", type=float, nargs="+", required=True)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--x0", type=float, default=0.0)
    p.add_argument("--initial-mass", type=float, default=1.0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("verify-kernel", help="kernel-to-operator limit errors over K")
    p.add_argument("--config", required=True)
    p.add_argument("--K-list", type=int, nargs="+", required=True)
    p.add_argument("--function", default="bump(0,2.5)")
    p.add_argument("--x-lo", type=float, default=-4.0)
    p.add_argument("--x-hi", type=float, default=4.0)
    p.add_argument("--x-points", type=int, default=17)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_verify_kernel)

    p = sub.add_parser("masscontrol-bounds", help="cutoff-family operator bounds")
    p.add_argument("--n-list", type=int, nargs="+", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--x-points", type=int, default=200)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_masscontrol)

    p = sub.add_parser("pde", help="nonlocal reaction-diffusion solve")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_pde)

    p = sub.add_parser("sde", help="jump SDE terminal ensemble")
    p.add_argument("--x0", type=float, default=0.0)
    p.add_argument("--sigma-hat", type=float, default=0.5)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--small-jumps", choices=("gaussian_match", "drop"),
                   default="gaussian_match")
    p.add_argument("--dt-max", type=float, default=0.01)
    p.add_argument("--paths", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_sde)

    p = sub.add_parser("mild-check", help="mild-formulation residual vs a PDE run")
    p.add_argument("--config", required=True, help="pde config (model+grid+T+output_times)")
    p.add_argument("--function", default="bump(0,1)")
    p.add_argument("--epsilon", type=float, default=0.15)
    p.add_argument("--dt-max", type=float, default=0.01)
    p.add_argument("--paths", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_mild_check)

    for name, loader, runner in (
            ("converge", ConvergeConfig.from_dict, converge_deterministic),
            ("qv-check", QvConfig.from_dict, superprocess_qv),
            ("moments", MomentConfig.from_dict, moment_bound_check),
            ("mass-escape", EscapeConfig.from_dict, mass_escape_check)):
        p = sub.add_parser(name, help=f"{name} experiment")
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", required=True)
        p.set_defaults(func=lambda a, ld=loader, rn=runner, nm=name.replace("-", "_"):
                       _run_harness(a, ld, rn, nm))

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
