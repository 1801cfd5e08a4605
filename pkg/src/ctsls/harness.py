"""Monte Carlo driver: replicate grid cells, fit estimators, aggregate metrics.

Each replicate's data come from ``rng_stream(master_seed, cell_key, r)``, so a
replicate is a pure function of the master seed, the cell and its index.
Workers return per-replicate records which are reduced in index order; the
reported numbers therefore do not depend on the number of workers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .estimator import fit_cols, fit_ctsls, fit_tsls_uncensored
from .simgen import (
    CALIBRATION_KEY,
    SCENARIOS,
    Calibration,
    SimConfig,
    TrueParams,
    calibrate_censoring,
    generate_dataset,
    get_scenario,
    rng_stream,
    stable_key,
)

log = logging.getLogger(__name__)

ESTIMATORS = ("ctsls_weighted", "ctsls_unweighted", "cols", "tsls_uncensored")
METRICS = ("mean_estimate", "mean_bias", "rmse", "empirical_var", "mean_sandwich_var", "coverage_95")
CSV_COLUMNS = ("scenario", "n", "censor_rate", "estimator", "metric", "value", "replicates", "converged")
Z95 = float(norm.ppf(0.975))

_FITTERS = {
    "ctsls_weighted": lambda s: fit_ctsls(s, weighted=True),
    "ctsls_unweighted": lambda s: fit_ctsls(s, weighted=False),
    "cols": fit_cols,
    "tsls_uncensored": fit_tsls_uncensored,
}


@dataclass(frozen=True)
class EstimatorSummary:
    mean_estimate: float
    mean_bias: float
    rmse: float
    empirical_var: float
    mean_sandwich_var: float
    coverage_95: float
    mean_runtime_s: float
    n_replicates: int
    n_converged: int

    def metrics(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


@dataclass(frozen=True)
class McReport:
    """Aggregated metrics for one grid cell, plus the per-replicate records."""

    scenario: str
    n: int
    censor_rate: float
    calibration: Calibration
    estimators: dict[str, EstimatorSummary]
    records: dict[str, dict[str, np.ndarray]] = field(repr=False, default_factory=dict)


def cell_key(config: SimConfig) -> int:
    return stable_key(f"{config.scenario.name}|{config.n}|{config.censor_rate!r}")


def default_grid(
    n_values=(100, 500, 1000),
    censor_rates=(0.0, 0.25, 0.5, 0.75),
    scenarios=("1", "2"),
    true_params: TrueParams | None = None,
) -> list[SimConfig]:
    tp = true_params or TrueParams()
    return [
        SimConfig(n=n, censor_rate=pc, scenario=SCENARIOS[s], true_params=tp)
        for s in scenarios
        for n in n_values
        for pc in censor_rates
    ]


def grid_from_dict(raw: dict) -> tuple[list[SimConfig], dict]:
    """Parse a grid description; returns configs and the remaining run options."""
    known = {"n", "censor_rates", "scenarios", "true_params", "replicates", "seed", "estimators"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown grid key(s): {sorted(unknown)}")
    tp = TrueParams(**raw["true_params"]) if "true_params" in raw else TrueParams()
    scen = [get_scenario(s) for s in raw.get("scenarios", ["1", "2"])]
    grid = [
        SimConfig(n=int(n), censor_rate=float(pc), scenario=s, true_params=tp)
        for s in scen
        for n in raw.get("n", [100, 500, 1000])
        for pc in raw.get("censor_rates", [0.0, 0.25, 0.5, 0.75])
    ]
    options = {k: raw[k] for k in ("replicates", "seed", "estimators") if k in raw}
    return grid, options


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("CTSLS_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    if threads < 1:
        raise ValueError("threads must be at least 1")
    return threads


def _calibrate(config: SimConfig, master_seed: int) -> Calibration:
    # shared by every n of a (scenario, params, censor_rate) triple
    key = stable_key(f"{config.scenario.name}|{config.censor_rate!r}")
    return calibrate_censoring(config, rng_stream(master_seed, CALIBRATION_KEY, key))


def _run_replicates(config: SimConfig, calibration: Calibration, master_seed: int, reps, estimators):
    key = cell_key(config)
    truth = config.true_params.beta1
    out = []
    for r in reps:
        sample, _ = generate_dataset(config, rng_stream(master_seed, key, r), calibration)
        row = {}
        for name in estimators:
            start = time.perf_counter()
            try:
                fit = _FITTERS[name](sample)
                est, var, conv = fit.beta1, fit.beta1_var, bool(fit.converged)
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                log.debug("replicate %d %s failed: %s", r, name, exc)
                est, var, conv = math.nan, math.nan, False
            elapsed = time.perf_counter() - start
            covered = conv and abs(est - truth) <= Z95 * math.sqrt(var)
            row[name] = (est, var, conv, covered, elapsed)
        out.append(row)
    return out


def _summarize_cell(records: dict[str, np.ndarray], truth: float) -> EstimatorSummary:
    est, var, conv, cov, rt = (records[k] for k in ("estimate", "sandwich_var", "converged", "covered", "runtime_s"))
    ok = np.isfinite(est)
    m = int(ok.sum())
    e = est[ok]
    n_conv = int(conv.sum())
    nan = math.nan
    return EstimatorSummary(
        mean_estimate=float(e.mean()) if m else nan,
        mean_bias=float(e.mean() - truth) if m else nan,
        rmse=float(np.sqrt(np.mean((e - truth) ** 2))) if m else nan,
        empirical_var=float(e.var(ddof=1)) if m > 1 else nan,
        mean_sandwich_var=float(var[ok].mean()) if m else nan,
        coverage_95=float(cov[conv].mean()) if n_conv else nan,
        mean_runtime_s=float(rt.mean()),
        n_replicates=int(est.size),
        n_converged=n_conv,
    )


def run_grid(
    grid: list[SimConfig],
    R: int,
    estimators=None,
    master_seed: int = 0,
    threads: int | None = None,
    progress=None,
) -> list[McReport]:
    """Run ``R`` replicates of every cell and aggregate per estimator.

    ``tsls_uncensored`` is only run on cells without censoring. Fits that
    raise are recorded as NaN and non-converged; coverage uses converged fits.
    """
    if R < 2:
        raise ValueError("R must be at least 2")
    wanted = tuple(estimators) if estimators else ESTIMATORS
    bad = set(wanted) - set(ESTIMATORS)
    if bad:
        raise ValueError(f"unknown estimator(s): {sorted(bad)}")
    threads = resolve_threads(threads)

    cals: dict[tuple, Calibration] = {}
    jobs = []
    for cfg in grid:
        ck = (cfg.scenario, cfg.true_params, cfg.censor_rate)
        if ck not in cals:
            cals[ck] = _calibrate(cfg, master_seed)
        names = tuple(e for e in wanted if e != "tsls_uncensored" or cfg.censor_rate == 0)
        jobs.append((cfg, cals[ck], names))

    chunk = max(1, min(50, R // max(1, threads)))
    tasks = [(i, range(lo, min(R, lo + chunk))) for i in range(len(jobs)) for lo in range(0, R, chunk)]
    rows: list[list] = [[None] * R for _ in jobs]

    def _store(i, reps, result):
        for r, row in zip(reps, result):
            rows[i][r] = row

    if threads == 1:
        for done, (i, reps) in enumerate(tasks, 1):
            cfg, cal, names = jobs[i]
            _store(i, reps, _run_replicates(cfg, cal, master_seed, reps, names))
            if progress:
                progress(done, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_run_replicates, jobs[i][0], jobs[i][1], master_seed, reps, jobs[i][2])
                for i, reps in tasks
            ]
            for done, ((i, reps), fut) in enumerate(zip(tasks, futures), 1):
                _store(i, reps, fut.result())
                if progress:
                    progress(done, len(tasks))

    reports = []
    for (cfg, cal, names), cell_rows in zip(jobs, rows):
        records, summaries = {}, {}
        for name in names:
            cols = list(zip(*(row[name] for row in cell_rows)))
            rec = {
                "estimate": np.array(cols[0], dtype=float),
                "sandwich_var": np.array(cols[1], dtype=float),
                "converged": np.array(cols[2], dtype=bool),
                "covered": np.array(cols[3], dtype=bool),
                "runtime_s": np.array(cols[4], dtype=float),
            }
            records[name] = rec
            summaries[name] = _summarize_cell(rec, cfg.true_params.beta1)
        reports.append(McReport(cfg.scenario.name, cfg.n, cfg.censor_rate, cal, summaries, records))
    return reports


def _json_float(x: float):
    return None if not math.isfinite(x) else x


def report_rows(reports: list[McReport]) -> list[tuple]:
    rows = []
    for rep in reports:
        for name, summ in rep.estimators.items():
            for metric, value in summ.metrics().items():
                rows.append(
                    (rep.scenario, rep.n, rep.censor_rate, name, metric, value, summ.n_replicates, summ.n_converged)
                )
    return rows


def report_json(reports: list[McReport]) -> list[dict]:
    return [
        {
            "scenario": rep.scenario,
            "n": rep.n,
            "censor_rate": rep.censor_rate,
            "calibration": {"mu": _json_float(rep.calibration.mu), "sigma_c": rep.calibration.sigma_c},
            "estimators": {
                name: {
                    **{m: _json_float(v) for m, v in summ.metrics().items()},
                    "replicates": summ.n_replicates,
                    "converged": summ.n_converged,
                }
                for name, summ in rep.estimators.items()
            },
        }
        for rep in reports
    ]


def summarize(reports: list[McReport], out_dir) -> dict[str, Path]:
    """Write ``report.csv`` (long format), ``report.json`` and ``timing.json``.

    The two report files hold only seed-determined numbers; wall-clock
    runtimes go to ``timing.json`` so that reports are reproducible byte for byte.
    """
    if not reports:
        raise ValueError("no reports to summarize")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "json": out / "report.json", "timing": out / "timing.json"}
    with open(paths["csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in report_rows(reports):
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump(report_json(reports), fh, indent=2)
        fh.write("\n")
    timing = [
        {
            "scenario": rep.scenario,
            "n": rep.n,
            "censor_rate": rep.censor_rate,
            "mean_runtime_s": {name: s.mean_runtime_s for name, s in rep.estimators.items()},
        }
        for rep in reports
    ]
    with open(paths["timing"], "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=2)
        fh.write("\n")
    return paths


def read_report_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["n"] = int(row["n"])
        row["censor_rate"] = float(row["censor_rate"])
        row["value"] = float(row["value"])
        row["replicates"] = int(row["replicates"])
        row["converged"] = int(row["converged"])
    return rows
