"""Ensemble experiments: statistics, growth-theorem checks, and reporting.

Experiments run path blocks in parallel (``MCSBP_WORKERS`` processes; the
per-block counter-based streams make the statistics identical for any worker
count), aggregate with order-insensitive accumulators, and record every
pass/fail decision together with its pre-registered tolerance so reports are
recomputable from their own numbers.

Two headline experiments verify the asymptotics of a supercritical process:

* ``slln_experiment``  -- the renormalized state aligns with the left
  eigenvector: direction errors shrink along a time ladder and per-type
  growth ratios approach one.
* ``xlogx_experiment`` -- a paired comparison of big-jump tails.  The
  martingale mean is flat for both branches; whether the big-jump
  ``x log x`` moment is finite decides if the martingale limit is
  non-degenerate (survivor mass stays bounded away from zero) or collapses
  (the fraction of paths with a tiny terminal martingale grows toward one).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .mechanism import BranchingMechanism
from .simulator import SimConfig, block_rng, simulate_block
from .spectral import SpectralData

__all__ = ["ExperimentError", "EnsembleStats", "ExperimentReport", "run_ensemble",
           "slln_experiment", "xlogx_experiment", "emit_report",
           "mechanism_fingerprint", "worker_count"]

ENV_WORKERS = "MCSBP_WORKERS"
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
SURVIVAL_THRESHOLD = 1e-6   # total mass separating survivors from trailing dust
SCHEMA_VERSION = "1"


class ExperimentError(RuntimeError):
    """Experiment preconditions violated."""


def worker_count() -> int:
    raw = os.environ.get(ENV_WORKERS, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ExperimentError(f"{ENV_WORKERS} must be an integer, got {raw!r}") from exc
    return max(1, n)


# ---------------------------------------------------------------------------
# Ensemble runner
# ---------------------------------------------------------------------------

@dataclass
class EnsembleStats:
    """Order-insensitive summary of an ensemble at the recorded times."""

    record_times: np.ndarray            # (T,)
    n_paths: int
    mean_x: np.ndarray                  # (T, d)
    se_x: np.ndarray                    # (T, d)
    mean_w: np.ndarray                  # (T,)
    se_w: np.ndarray                    # (T,)
    w_quantiles: np.ndarray             # (T, len(QUANTILES))
    survival_fraction: np.ndarray       # (T,)
    direction_error_quantiles: np.ndarray  # (T, len(QUANTILES)), NaN if no survivors
    laplace_mean: dict                  # f tuple -> (T,) arrays
    laplace_se: dict
    w_values: np.ndarray                # (T, n) per-path martingale values
    x_values: np.ndarray                # (T, n, d) per-path states
    direction_errors: np.ndarray        # (T, n), NaN for non-survivors
    clamp_count: int
    dropped_jump_variance: float
    extinct_fraction: float

    def to_dict(self) -> dict:
        return {
            "record_times": self.record_times.tolist(),
            "n_paths": self.n_paths,
            "mean_x": self.mean_x.tolist(),
            "se_x": self.se_x.tolist(),
            "mean_w": self.mean_w.tolist(),
            "se_w": self.se_w.tolist(),
            "w_quantiles": self.w_quantiles.tolist(),
            "quantile_levels": list(QUANTILES),
            "survival_fraction": self.survival_fraction.tolist(),
            "direction_error_quantiles": self.direction_error_quantiles.tolist(),
            "laplace_mean": {str(list(k)): v.tolist() for k, v in self.laplace_mean.items()},
            "laplace_se": {str(list(k)): v.tolist() for k, v in self.laplace_se.items()},
            "clamp_count": self.clamp_count,
            "dropped_jump_variance": self.dropped_jump_variance,
            "extinct_fraction": self.extinct_fraction,
        }


def _block_task(args):
    (mech, spectral, x0, config, block_index, size, record_times, f_list, stream) = args
    rng = block_rng(config.seed, block_index, stream=stream)
    block = simulate_block(mech, x0, config, rng, size, record_times=record_times)
    x = block.x                                    # (T, size, d)
    t_rec = block.record_times
    w = np.exp(-spectral.lambda1 * t_rec)[:, None] * (x @ spectral.phi)
    mass = x.sum(axis=2)
    surviving = mass > SURVIVAL_THRESHOLD
    target = spectral.phi_hat / spectral.phi_hat.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        direction = x / mass[:, :, None]
        dir_err = np.abs(direction - target).sum(axis=2)
    dir_err = np.where(surviving, dir_err, np.nan)
    laplace = {}
    for f in f_list:
        laplace[f] = np.exp(-(x @ np.asarray(f)))
    return {
        "sum_x": x.sum(axis=1), "sumsq_x": (x**2).sum(axis=1),
        "w": w, "x": x, "dir_err": dir_err, "surviving": surviving,
        "laplace": laplace,
        "clamp": block.clamp_count, "dropped": block.dropped_jump_variance,
        "extinct": int((block.extinct_step >= 0).sum()),
    }


def run_ensemble(mech: BranchingMechanism, spectral: SpectralData, x0,
                 config: SimConfig, n_paths: int, record_times=None,
                 f_list=(), stream: int = 0) -> EnsembleStats:
    """Simulate ``n_paths`` trajectories and gather statistics at the grid times.

    Blocks of ``config.block_size`` paths each own a counter-based stream, so
    the result depends on (seed, config, mechanism) only, never on scheduling.
    """
    if n_paths < 2:
        raise ExperimentError("ensembles need at least two paths")
    x0 = np.asarray(x0, dtype=float)
    if record_times is None:
        record_times = [config.horizon]
    record_times = sorted(record_times)
    f_list = [tuple(float(v) for v in f) for f in f_list]

    sizes = [config.block_size] * (n_paths // config.block_size)
    if n_paths % config.block_size:
        sizes.append(n_paths % config.block_size)
    tasks = [
        (mech, spectral, x0, config, k, size, record_times, f_list, stream)
        for k, size in enumerate(sizes)
    ]
    workers = worker_count()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_block_task, tasks))
    else:
        results = [_block_task(t) for t in tasks]

    n_rec = len(record_times)
    d = mech.d
    sum_x = np.zeros((n_rec, d))
    sumsq_x = np.zeros((n_rec, d))
    clamp, dropped, extinct = 0, 0.0, 0
    w_parts, x_parts, dir_parts, surv_parts = [], [], [], []
    lap_parts = {f: [] for f in f_list}
    for r in results:  # fixed block order: bit-identical for any worker count
        sum_x += r["sum_x"]
        sumsq_x += r["sumsq_x"]
        clamp += r["clamp"]
        dropped += r["dropped"]
        extinct += r["extinct"]
        w_parts.append(r["w"])
        x_parts.append(r["x"])
        dir_parts.append(r["dir_err"])
        surv_parts.append(r["surviving"])
        for f in f_list:
            lap_parts[f].append(r["laplace"][f])

    w_values = np.concatenate(w_parts, axis=1)
    x_values = np.concatenate(x_parts, axis=1)
    dir_errors = np.concatenate(dir_parts, axis=1)
    surviving = np.concatenate(surv_parts, axis=1)
    mean_x = sum_x / n_paths
    var_x = np.maximum(sumsq_x - n_paths * mean_x**2, 0.0) / (n_paths - 1)
    se_x = np.sqrt(var_x / n_paths)

    dir_q = np.full((n_rec, len(QUANTILES)), np.nan)
    for k in range(n_rec):
        vals = dir_errors[k][surviving[k]]
        if vals.size:
            dir_q[k] = np.quantile(vals, QUANTILES)

    lap_mean, lap_se = {}, {}
    for f in f_list:
        vals = np.concatenate(lap_parts[f], axis=1)
        lap_mean[f] = vals.mean(axis=1)
        lap_se[f] = vals.std(axis=1, ddof=1) / math.sqrt(n_paths)

    return EnsembleStats(
        record_times=np.asarray(record_times, dtype=float),
        n_paths=n_paths,
        mean_x=mean_x, se_x=se_x,
        mean_w=w_values.mean(axis=1),
        se_w=w_values.std(axis=1, ddof=1) / math.sqrt(n_paths),
        w_quantiles=np.quantile(w_values, QUANTILES, axis=1).T,
        survival_fraction=surviving.mean(axis=1),
        direction_error_quantiles=dir_q,
        laplace_mean=lap_mean, laplace_se=lap_se,
        w_values=w_values, x_values=x_values, direction_errors=dir_errors,
        clamp_count=clamp, dropped_jump_variance=dropped,
        extinct_fraction=extinct / n_paths,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    """Outcome of one experiment; every verdict is recomputable from the data."""

    experiment: str
    mechanism_fingerprint: str
    seed: int
    n_paths: int
    t_list: list
    tolerances: dict
    statistics: dict
    criteria: list = field(default_factory=list)
    runtime_seconds: float = 0.0
    comparisons: int = 0         # simultaneous-test count (Bonferroni context)
    schema_version: str = SCHEMA_VERSION

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.criteria)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "mechanism_fingerprint": self.mechanism_fingerprint,
            "seed": self.seed,
            "n_paths": self.n_paths,
            "t_list": list(self.t_list),
            "tolerances": self.tolerances,
            "statistics": self.statistics,
            "criteria": self.criteria,
            "comparisons": self.comparisons,
            "runtime_seconds": self.runtime_seconds,
            "passed": self.passed,
        }


def mechanism_fingerprint(mech: BranchingMechanism) -> str:
    """Stable hash of the mechanism's defining data."""
    from .config import mechanism_to_dict

    payload = json.dumps(mechanism_to_dict(mech), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _criterion(name: str, observed: float, threshold: float, passed: bool) -> dict:
    return {"name": name, "observed": observed, "threshold": threshold,
            "passed": bool(passed)}


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

DEFAULT_SLLN_TOLERANCES = {
    "direction_final_median": 0.05,
    "direction_monotone_slack": 0.0,
    "ratio_final_tolerance": 0.05,
    "survival_threshold": SURVIVAL_THRESHOLD,
}


def slln_experiment(mech: BranchingMechanism, spectral: SpectralData, x0,
                    config: SimConfig, n_paths: int, t_list,
                    tolerances: dict | None = None) -> ExperimentReport:
    """Direction alignment and per-type growth ratios along a time ladder."""
    start = time.perf_counter()
    if not spectral.is_supercritical:
        raise ExperimentError("growth experiments need a supercritical mechanism")
    verdict = mech.check_xlogx()
    if not verdict.holds:
        raise ExperimentError(
            "the big-jump x log x moment diverges, so the martingale limit "
            "degenerates; run xlogx_experiment for this mechanism instead"
        )
    tol = dict(DEFAULT_SLLN_TOLERANCES)
    tol.update(tolerances or {})
    t_list = sorted(t_list)
    run_cfg = replace(config, horizon=max(t_list))
    stats = run_ensemble(mech, spectral, x0, run_cfg, n_paths, record_times=t_list)

    ratio_medians = np.full((len(t_list), mech.d), np.nan)
    dir_medians = np.full(len(t_list), np.nan)
    for k, t in enumerate(t_list):
        surv = ~np.isnan(stats.direction_errors[k])
        if surv.any():
            dir_medians[k] = float(np.median(stats.direction_errors[k][surv]))
        ok = surv & (stats.w_values[k] > 0)
        if ok.any():
            # exp(-lambda1 t) X_t(j) / (W_t phi_hat_j) = X_t(j) / (<phi, X_t> phi_hat_j)
            x_ok = stats.x_values[k][ok]
            scale = (x_ok @ spectral.phi)[:, None] * spectral.phi_hat[None, :]
            ratio_medians[k] = np.median(x_ok / scale, axis=0)

    criteria = []
    mono = all(
        dir_medians[k + 1] <= dir_medians[k] + tol["direction_monotone_slack"]
        for k in range(len(t_list) - 1)
    )
    criteria.append(_criterion("direction_error_median_non_increasing",
                               float(np.max(np.diff(dir_medians))) if len(t_list) > 1 else 0.0,
                               tol["direction_monotone_slack"], mono))
    criteria.append(_criterion("direction_error_final_median", float(dir_medians[-1]),
                               tol["direction_final_median"],
                               dir_medians[-1] < tol["direction_final_median"]))
    final_dev = float(np.max(np.abs(ratio_medians[-1] - 1.0)))
    criteria.append(_criterion("growth_ratio_final_median", final_dev,
                               tol["ratio_final_tolerance"],
                               final_dev <= tol["ratio_final_tolerance"]))

    report = ExperimentReport(
        experiment="slln",
        mechanism_fingerprint=mechanism_fingerprint(mech),
        seed=config.seed, n_paths=n_paths, t_list=list(t_list),
        tolerances=tol,
        statistics={
            "ensemble": stats.to_dict(),
            "direction_error_median": dir_medians.tolist(),
            "growth_ratio_medians": ratio_medians.tolist(),
            "xlogx_per_type": list(verdict.per_type),
        },
        criteria=criteria,
        comparisons=len(criteria),
    )
    report.runtime_seconds = time.perf_counter() - start
    return report


def xlogx_experiment(mech_holds: BranchingMechanism, mech_fails: BranchingMechanism,
                     spectral: SpectralData, x0, config: SimConfig, n_paths: int,
                     t_list, tolerances: dict | None = None) -> ExperimentReport:
    """Paired tail comparison: martingale mean versus martingale distribution."""
    start = time.perf_counter()
    if not np.allclose(mech_holds.b, mech_fails.b, atol=1e-10):
        raise ExperimentError("the paired mechanisms must share the drift matrix")
    if not np.allclose(mech_holds.c, mech_fails.c, atol=1e-12):
        raise ExperimentError("the paired mechanisms must share diffusion coefficients")
    if not spectral.is_supercritical:
        raise ExperimentError("the tail dichotomy needs a supercritical mechanism")

    tol = {
        "mean_w_se_multiple": 3.0,
        "collapse_fraction_final": 0.9,
        "collapse_level": 0.01,
        "survivor_level": 0.05,
        "survivor_fraction": 0.5,
        "survival_threshold": SURVIVAL_THRESHOLD,
    }
    tol.update(tolerances or {})
    t_list = sorted(t_list)
    run_cfg = replace(config, horizon=max(t_list))
    x0 = np.asarray(x0, dtype=float)
    w0 = float(spectral.phi @ x0)

    criteria: list[dict] = []
    branches = {}
    for label, mech in (("holds", mech_holds), ("fails", mech_fails)):
        stats = run_ensemble(mech, spectral, x0, run_cfg, n_paths, record_times=t_list)
        verdict = mech.check_xlogx()
        collapse = (stats.w_values < tol["collapse_level"] * w0).mean(axis=1)
        surv_mask = ~np.isnan(stats.direction_errors)
        cond_frac = np.full(len(t_list), np.nan)
        surv_median = np.full(len(t_list), np.nan)
        for k in range(len(t_list)):
            sel = surv_mask[k]
            if sel.any():
                w_surv = stats.w_values[k][sel]
                cond_frac[k] = float((w_surv > tol["survivor_level"] * w0).mean())
                surv_median[k] = float(np.median(w_surv))
        branches[label] = {
            "xlogx_holds": verdict.holds,
            "xlogx_per_type": list(verdict.per_type),
            "mean_w": stats.mean_w.tolist(),
            "se_w": stats.se_w.tolist(),
            "collapse_fraction": collapse.tolist(),
            "survivor_fraction_above_level": cond_frac.tolist(),
            "survivor_median_w": surv_median.tolist(),
            "survival_fraction": stats.survival_fraction.tolist(),
            "w_quantiles": stats.w_quantiles.tolist(),
        }

        # The martingale mean is flat for both branches.
        dev = np.abs(stats.mean_w - w0)
        worst = int(np.argmax(dev - tol["mean_w_se_multiple"] * stats.se_w))
        criteria.append(_criterion(
            f"{label}: mean W within {tol['mean_w_se_multiple']:g} SE of start",
            float(dev[worst]), float(tol["mean_w_se_multiple"] * stats.se_w[worst]),
            bool(np.all(dev <= tol["mean_w_se_multiple"] * stats.se_w)),
        ))

        # Distribution criteria follow the branch's own integrability verdict,
        # so a degenerate pair (both tails integrable) is judged symmetrically.
        if verdict.holds:
            criteria.append(_criterion(
                f"{label}: survivor mass bounded away from zero",
                float(cond_frac[-1]), tol["survivor_fraction"],
                bool(cond_frac[-1] > tol["survivor_fraction"]),
            ))
            if "survivor_median_floor" in tol:
                criteria.append(_criterion(
                    f"{label}: survivor median above committed floor",
                    float(surv_median[-1]), tol["survivor_median_floor"],
                    bool(surv_median[-1] >= tol["survivor_median_floor"]),
                ))
        else:
            increasing = bool(np.all(np.diff(collapse) >= 0))
            criteria.append(_criterion(
                f"{label}: collapse fraction increasing along t_list",
                float(np.min(np.diff(collapse))) if len(t_list) > 1 else 0.0,
                0.0, increasing,
            ))
            criteria.append(_criterion(
                f"{label}: collapse fraction at final time",
                float(collapse[-1]), tol["collapse_fraction_final"],
                bool(collapse[-1] >= tol["collapse_fraction_final"]),
            ))

    report = ExperimentReport(
        experiment="xlogx",
        mechanism_fingerprint=(mechanism_fingerprint(mech_holds) + ":"
                               + mechanism_fingerprint(mech_fails)),
        seed=config.seed, n_paths=n_paths, t_list=list(t_list),
        tolerances=tol,
        statistics={"branches": branches, "w0": w0},
        criteria=criteria,
        comparisons=len(criteria),
    )
    report.runtime_seconds = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("experiment", "t", "branch", "statistic", "value")


def emit_report(report: ExperimentReport, out_dir, formats=("json", "csv")) -> list:
    """Write the report; JSON round-trips bit-exactly, CSV is long-format.

    CSV schema (fixed column order): experiment, t, branch, statistic, value,
    one row per recorded scalar, sorted by (t, branch, statistic).
    """
    import pathlib

    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out_dir / f"{report.experiment}_report.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        written.append(path)
    if "csv" in formats:
        path = out_dir / f"{report.experiment}_report.csv"
        rows = _csv_rows(report)
        lines = [",".join(CSV_COLUMNS)]
        for row in rows:
            lines.append(",".join(str(v) for v in row))
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def _csv_rows(report: ExperimentReport) -> list:
    rows = []
    stats = report.statistics
    t_list = report.t_list

    def emit(branch, name, series):
        for t, v in zip(t_list, series):
            rows.append((report.experiment, t, branch, name, repr(float(v))))

    if report.experiment == "xlogx":
        for branch, data in stats.get("branches", {}).items():
            for name in ("mean_w", "se_w", "collapse_fraction",
                         "survivor_fraction_above_level", "survivor_median_w",
                         "survival_fraction"):
                emit(branch, name, data[name])
    elif report.experiment == "slln":
        emit("", "direction_error_median", stats["direction_error_median"])
        ens = stats["ensemble"]
        emit("", "mean_w", ens["mean_w"])
        emit("", "se_w", ens["se_w"])
        emit("", "survival_fraction", ens["survival_fraction"])
    rows.sort(key=lambda r: (r[1], r[2], r[3]))
    return rows


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
