"""Command line interface.

Subcommands::

    mcsbp validate --config cfg.yaml            mechanism invariant report (JSON)
    mcsbp spectral --config cfg.yaml            eigenvalue, eigenvectors, class, gap
    mcsbp laplace  --config cfg.yaml --t 1.0    flow and tilt weights (CSV + JSON)
    mcsbp simulate --config cfg.yaml --paths N  path CSV + ensemble JSON summary
    mcsbp slln     --config cfg.yaml            growth-direction experiment
    mcsbp xlogx    --config holds.yaml --config-fails fails.yaml
    mcsbp spine    --config cfg.yaml            three-way tilt consistency check

Exit code 0 means every criterion of the invoked experiment passed.  The
worker count for ensembles comes from the MCSBP_WORKERS environment variable
(default 1); results are bit-identical for any worker count.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfg
from .harness import emit_report, run_ensemble, slln_experiment, xlogx_experiment
from .laplace_flow import laplace_functional, solve_theta, solve_v, tilted_laplace
from .mechanism import validate
from .simulator import SimConfig
from .spectral import check_decay, perron
from .spine import consistency_triangle


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML/JSON configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", default=None, help="directory for report files")
    p.add_argument("--paths", type=int, default=None, help="override the path count")
    p.add_argument("--format", choices=("csv", "json"), action="append", default=None,
                   help="report formats to write (repeatable; default both)")


def _load(args):
    tree = cfg.load_config(args.config)
    mech = cfg.mechanism_from_config(tree)
    sim = cfg.sim_config_from_config(tree, seed=args.seed)
    exp = cfg.experiment_params(tree)
    if args.paths is not None:
        exp["n_paths"] = args.paths
    return tree, mech, sim, exp


def _emit(payload: dict, args) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=float)
    print(text)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.json").write_text(text)


def cmd_validate(args) -> int:
    _, mech, _, _ = _load(args)
    checks = validate(mech)
    _emit({"checks": checks, "passed": all(c["passed"] for c in checks)}, args)
    return 0 if all(c["passed"] for c in checks) else 1


def cmd_spectral(args) -> int:
    _, mech, _, _ = _load(args)
    spec = perron(mech.b)
    fit = check_decay(spec, mech.b, np.linspace(0.5, 8.0, 16))
    _emit({
        "lambda1": spec.lambda1,
        "phi": spec.phi.tolist(),
        "phi_hat": spec.phi_hat.tolist(),
        "criticality": spec.criticality,
        "spectral_gap_estimate": fit.c2,
        "decay_prefactor": fit.c1,
        "mean_matrix_sup": fit.c3_empirical,
    }, args)
    return 0


def cmd_laplace(args) -> int:
    _, mech, sim, exp = _load(args)
    f = np.asarray(args.f if args.f is not None else exp["f"], dtype=float)
    x = np.asarray(args.x if args.x is not None else exp["x0"], dtype=float)
    t = args.t if args.t is not None else max(exp["t_list"])
    dt = args.dt if args.dt is not None else sim.dt
    spec = perron(mech.b)
    if spec.is_supercritical:
        sol = solve_theta(mech, spec, f, t, dt)
        theta = sol.theta
        flow = sol.flow
        tilt = tilted_laplace(mech, spec, x, f, t, dt)
    else:
        flow = solve_v(mech, f, t, dt)
        theta = np.full_like(flow.v, np.nan)
        tilt = None
    lap = float(np.exp(-(x @ flow.terminal)))

    header = ["t"] + [f"v_{k + 1}" for k in range(mech.d)] \
        + [f"theta_{k + 1}" for k in range(mech.d)]
    lines = [",".join(header)]
    stride = max(1, sim.grid_stride)
    idx = list(range(0, len(flow.t_grid), stride))
    if idx[-1] != len(flow.t_grid) - 1:
        idx.append(len(flow.t_grid) - 1)
    for k in idx:
        row = [repr(float(flow.t_grid[k]))]
        row += [repr(float(v)) for v in flow.v[k]]
        row += [repr(float(v)) for v in theta[k]]
        lines.append(",".join(row))
    csv_text = "\n".join(lines) + "\n"
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "laplace_flow.csv").write_text(csv_text)
    else:
        sys.stdout.write(csv_text)

    _emit({
        "t": t, "dt": dt, "f": f.tolist(), "x": x.tolist(),
        "v_terminal": flow.v[-1].tolist(),
        "laplace_functional": lap,
        "tilted_laplace": tilt,
        "criticality": spec.criticality,
    }, args)
    return 0


def cmd_simulate(args) -> int:
    _, mech, sim, exp = _load(args)
    spec = perron(mech.b)
    n_paths = exp["n_paths"]
    stats = run_ensemble(mech, spec, exp["x0"], sim, n_paths,
                         f_list=[tuple(exp["f"])])
    out_dir = Path(args.out_dir) if args.out_dir else Path.cwd()
    out_dir.mkdir(parents=True, exist_ok=True)

    formats = args.format or ["csv", "json"]
    if "csv" in formats:
        # per-path sample: a decimated CSV of the first paths, capped for size
        from .simulator import block_rng, simulate_block
        n_csv = min(n_paths, args.csv_paths)
        rng = block_rng(sim.seed, 0)
        block = simulate_block(mech, exp["x0"], sim, rng, n_csv)
        w = np.exp(-spec.lambda1 * block.record_times)[:, None] \
            * (block.x @ spec.phi)
        lines = [",".join(["path_id", "t"]
                          + [f"X_{k + 1}" for k in range(mech.d)] + ["W"])]
        for p in range(n_csv):
            for k, t in enumerate(block.record_times):
                row = [str(p), repr(float(t))]
                row += [repr(float(v)) for v in block.x[k, p]]
                row.append(repr(float(w[k, p])))
                lines.append(",".join(row))
        (out_dir / "paths.csv").write_text("\n".join(lines) + "\n")

    summary = {
        "n_paths": n_paths,
        "record_times": stats.record_times.tolist(),
        "mean_x": stats.mean_x.tolist(),
        "se_x": stats.se_x.tolist(),
        "mean_w": stats.mean_w.tolist(),
        "se_w": stats.se_w.tolist(),
        "clamp_count": stats.clamp_count,
        "extinction_fraction": stats.extinct_fraction,
        "survival_fraction": stats.survival_fraction.tolist(),
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if "json" in formats:
        (out_dir / "simulate_summary.json").write_text(text)
    return 0


def cmd_slln(args) -> int:
    _, mech, sim, exp = _load(args)
    spec = perron(mech.b)
    report = slln_experiment(mech, spec, exp["x0"], sim, exp["n_paths"], exp["t_list"])
    if args.out_dir:
        emit_report(report, args.out_dir, formats=args.format or ("json", "csv"))
    print(json.dumps({"criteria": report.criteria, "passed": report.passed},
                     indent=2, sort_keys=True))
    return 0 if report.passed else 1


def cmd_xlogx(args) -> int:
    tree, mech_holds, sim, exp = _load(args)
    fails_tree = cfg.load_config(args.config_fails)
    mech_fails = cfg.mechanism_from_config(fails_tree)
    spec = perron(mech_holds.b)
    report = xlogx_experiment(mech_holds, mech_fails, spec, exp["x0"], sim,
                              exp["n_paths"], exp["t_list"])
    if args.out_dir:
        emit_report(report, args.out_dir, formats=args.format or ("json", "csv"))
    print(json.dumps({"criteria": report.criteria, "passed": report.passed},
                     indent=2, sort_keys=True))
    return 0 if report.passed else 1


def cmd_spine(args) -> int:
    _, mech, sim, exp = _load(args)
    spec = perron(mech.b)
    t = args.t if args.t is not None else max(exp["t_list"])
    sim = replace(sim, horizon=t)
    result = consistency_triangle(
        mech, spec, exp["x0"], exp["f"], t, exp["n_paths"], sim,
        deltas=tuple(exp["delta_excursion"]),
    )
    _emit(result, args)
    return 0 if result["passed"] else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mcsbp", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("validate", cmd_validate), ("spectral", cmd_spectral),
                     ("slln", cmd_slln), ("simulate", cmd_simulate)):
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)
        if name == "simulate":
            p.add_argument("--csv-paths", type=int, default=10,
                           help="paths to materialize in the CSV sample")

    p = sub.add_parser("laplace")
    _add_common(p)
    p.add_argument("--f", type=float, nargs="+", default=None)
    p.add_argument("--x", type=float, nargs="+", default=None)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--dt", type=float, default=None)
    p.set_defaults(fn=cmd_laplace)

    p = sub.add_parser("xlogx")
    _add_common(p)
    p.add_argument("--config-fails", required=True,
                   help="configuration of the diverging-tail branch")
    p.set_defaults(fn=cmd_xlogx)

    p = sub.add_parser("spine")
    _add_common(p)
    p.add_argument("--t", type=float, default=None)
    p.set_defaults(fn=cmd_spine)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
