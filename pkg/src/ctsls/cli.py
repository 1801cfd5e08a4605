"""``ctsls`` command line: fit a CSV sample, simulate data, run benchmarks.

Exit codes: 0 success, 1 estimator non-convergence (outputs still written),
2 input or estimation error (a JSON error object goes to standard error).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import harness
from .dataset import ColumnSpec, DatasetError, load_csv, validate, write_csv
from .estimator import fit_cols, fit_ctsls
from .simgen import SimConfig, calibration_for, generate_dataset, rng_stream, stable_key

EXIT_OK, EXIT_NONCONVERGED, EXIT_INPUT = 0, 1, 2

PRESET_GRIDS = {
    "desk": {},
    "smoke": {"n": [100], "censor_rates": [0.25], "scenarios": ["1"], "replicates": 5},
}


class InputError(Exception):
    def __init__(self, message, **extra):
        super().__init__(message)
        self.extra = extra


def _fail(exc: Exception, **extra) -> int:
    payload = {"error": str(exc), "type": type(exc).__name__, **extra}
    print(json.dumps(payload), file=sys.stderr)
    return EXIT_INPUT


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {path}: {exc.msg}", line=exc.lineno, column=exc.colno) from None


def _emit(payload: dict, output: str | None) -> None:
    text = json.dumps(payload, indent=2, allow_nan=False) + "\n"
    if output:
        Path(output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _clean(obj):
    # JSON has no inf/nan
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _table(fits: dict) -> str:
    lines = [f"{'estimator':<18}{'term':<12}{'estimate':>11}{'SE':>10}{'95% CI':>24}{'p':>10}"]
    for name, fit in fits.items():
        for term, c in fit["coefficients"].items():
            if not term.startswith("beta"):
                continue
            ci = f"({c['ci_95'][0]:.4f}, {c['ci_95'][1]:.4f})"
            lines.append(
                f"{name:<18}{term:<12}{c['estimate']:>11.4f}{c['std_error']:>10.4f}{ci:>24}{c['p_value']:>10.3g}"
            )
        lines.append(f"{'':<18}iterations={fit['iterations']} converged={fit['converged']} "
                     f"time={fit['runtime_s']:.3f}s")
    return "\n".join(lines)


def cmd_fit(args) -> int:
    schema = ColumnSpec.from_json(args.schema) if args.schema else ColumnSpec()
    if args.raw_time:
        schema = ColumnSpec(**{**schema.__dict__, "raw_time": True})
    sample = load_csv(args.input, schema)
    fits = {}
    if not args.unweighted:
        fits["ctsls_weighted"] = fit_ctsls(sample, tol=args.tol, kmax=args.kmax, weighted=True)
    fits["ctsls_unweighted"] = fit_ctsls(sample, tol=args.tol, kmax=args.kmax, weighted=False)
    fits["cols"] = fit_cols(sample)
    payload = _clean(
        {
            "n": sample.n,
            "p": sample.p,
            "q": sample.q,
            "censoring_fraction": sample.censoring_fraction,
            "warnings": validate(sample),
            "fits": {k: v.to_dict() for k, v in fits.items()},
        }
    )
    _emit(payload, args.output)
    print(_table(payload["fits"]), file=sys.stdout if args.output else sys.stderr)
    return EXIT_OK if all(f.converged for f in fits.values()) else EXIT_NONCONVERGED


def cmd_simulate(args) -> int:
    raw = _read_json(args.input)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        config = SimConfig.from_dict(raw)
    except (TypeError, KeyError) as exc:
        raise InputError(f"invalid simulation config: {exc}") from None
    cal = calibration_for(config)
    sample, oracle = generate_dataset(config, rng_stream(config.seed, stable_key("simulate")), cal)
    out = Path(args.output)
    write_csv(sample, out, raw_time=True)
    tp = config.true_params
    sidecar = {
        "raw_time": True,
        "seed": config.seed,
        "n": config.n,
        "censor_rate": config.censor_rate,
        "realized_censoring_fraction": sample.censoring_fraction,
        "scenario": config.scenario.to_dict(),
        "calibration": {"mu": cal.mu, "sigma_c": cal.sigma_c, "censoring_disabled": math.isinf(cal.mu)},
        "true_params": {"alpha1": tp.alpha1, "alpha2": tp.alpha2, "beta1": tp.beta1, "beta2": tp.beta2},
    }
    out.with_name(out.stem + ".meta.json").write_text(json.dumps(_clean(sidecar), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    spec = args.grid or "desk"
    raw = dict(PRESET_GRIDS[spec]) if spec in PRESET_GRIDS else _read_json(spec)
    if not isinstance(raw, dict):
        raise InputError("grid JSON must be an object")
    try:
        grid, opts = harness.grid_from_dict(raw)
    except (TypeError, KeyError) as exc:
        raise InputError(f"invalid grid: {exc}") from None
    R = args.replicates or int(opts.get("replicates", 500))
    seed = args.seed if args.seed is not None else int(opts.get("seed", 0))

    def progress(done, total):
        if done == total or done % max(1, total // 20) == 0:
            logging.info("benchmark: %d/%d tasks", done, total)

    reports = harness.run_grid(grid, R, opts.get("estimators"), master_seed=seed, threads=args.threads, progress=progress)
    paths = harness.summarize(reports, args.output)
    logging.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    incomplete = any(
        s.n_converged < s.n_replicates for rep in reports for name, s in rep.estimators.items()
        if name.startswith("ctsls")
    )
    return EXIT_NONCONVERGED if incomplete else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctsls", description="Censored two-stage least squares for IV AFT models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit cTSLS and comparators to a CSV sample")
    p.add_argument("--input", required=True, help="dataset CSV")
    p.add_argument("--output", help="write the JSON report here instead of standard output")
    p.add_argument("--schema", help="JSON column-name schema")
    p.add_argument("--raw-time", action="store_true", help="time column is on the raw (positive) scale")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--kmax", type=int, default=10)
    p.add_argument("--unweighted", action="store_true", help="skip the weighted fit")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="generate one simulated dataset")
    p.add_argument("--input", "--config", dest="input", required=True, help="simulation config JSON")
    p.add_argument("--output", required=True, help="CSV path; a <stem>.meta.json sidecar is written next to it")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="run a Monte Carlo grid")
    p.add_argument("--grid", help="grid JSON path or preset name (desk, smoke)")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes (default: CTSLS_THREADS or CPU count)")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    for name in ("tol", "kmax", "replicates", "threads"):
        value = getattr(args, name, None)
        if value is not None and value <= 0:
            return _fail(InputError(f"--{name} must be positive"))
    try:
        return args.func(args)
    except InputError as exc:
        return _fail(exc, **exc.extra)
    except (DatasetError, ValueError, KeyError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
