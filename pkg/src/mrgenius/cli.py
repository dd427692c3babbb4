"""Command-line interface: ``mrgenius estimate | diagnose | simulate``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import additive, baselines, link, simulation, survival
from .data import ColumnSchema, ExposureKind, ObservationTable, load_csv, relevance_diagnostic
from .errors import ConvergenceError, DataValidationError, IdentificationError, MRGeniusError
from .inference import AdditiveSystem, check_bread

EXIT_OK, EXIT_VALIDATION, EXIT_IDENTIFICATION, EXIT_CONVERGENCE = 0, 2, 3, 4

METHODS = ("genius", "genius-gmm", "genius-efficient", "mult-outcome", "mult-exposure", "odds-ratio",
           "add-hazards", "tsls", "oracle-tsls", "mr-egger")


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    data: str | None = None
    method: str = "genius"
    level: float = 0.95
    out: str | None = None

    def validate(self, kind: ExposureKind | None = None, survival_mode: bool = False):
        if not 0 < self.level < 1:
            raise DataValidationError(f"--level must lie in (0, 1), got {self.level}")
        if self.subcommand != "estimate":
            return
        if self.method == "odds-ratio" and kind is not ExposureKind.BINARY:
            raise DataValidationError("method odds-ratio needs a binary exposure "
                                      f"(exposure kind is {kind.value if kind else 'unknown'})")
        if self.method == "mult-exposure" and kind is ExposureKind.CONTINUOUS:
            raise DataValidationError("method mult-exposure needs a binary or count exposure")
        if self.method == "add-hazards" and not survival_mode:
            raise DataValidationError("method add-hazards needs --event-col and --time-col")
        if self.method != "add-hazards" and survival_mode:
            raise DataValidationError(f"method {self.method} does not take survival columns")


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _split(value: str | None) -> tuple[str, ...]:
    if not value:
        return ()
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _floats(value: str | None, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in _split(value))
    except ValueError:
        raise DataValidationError(f"{flag} expects comma-separated numbers, got {value!r}") from None


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise DataValidationError("--threads must be at least 1")
        return args.threads
    return survival.default_threads()


def _load(args) -> ObservationTable:
    ivs = _split(args.iv_cols)
    if not ivs:
        raise DataValidationError("--iv-cols is required")
    survival_mode = bool(args.event_col or args.time_col)
    if survival_mode and not (args.event_col and args.time_col):
        raise DataValidationError("survival data needs both --event-col and --time-col")
    outcome = args.time_col if survival_mode else args.outcome_col
    if not outcome:
        raise DataValidationError("--outcome-col is required")
    if not args.exposure_col:
        raise DataValidationError("--exposure-col is required")
    kind = args.exposure_kind
    schema = ColumnSchema(iv_cols=ivs, exposure_col=args.exposure_col, outcome_col=outcome,
                          covariate_cols=_split(args.covariate_cols), event_col=args.event_col,
                          exposure_kind="continuous" if kind == "auto" else kind)
    table = load_csv(args.data, schema)
    if kind == "auto" and table.n and np.all((table.a == 0) | (table.a == 1)):
        table = replace(table, exposure_kind=ExposureKind.BINARY)
    return table


def _write_vcov(path: str, estimate):
    cov = getattr(estimate, "covariance", None)
    if cov is None:
        raise DataValidationError(f"method {estimate.method} has no covariance matrix to emit")
    layout = estimate.sandwich.layout
    names = [f"theta{j}" for j in range(cov.shape[0])]
    if isinstance(layout, dict):
        for block, sl in layout.items():
            idx = range(sl.start, sl.stop) if isinstance(sl, slice) else [sl]
            for k, j in enumerate(idx):
                names[j] = block if len(idx) == 1 else f"{block}[{k}]"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["", *names])
        for name, row in zip(names, cov):
            w.writerow([name, *(repr(float(v)) for v in row)])


def _estimate(args) -> dict:
    table = _load(args)
    cfg = RunConfig("estimate", args.data, args.method, args.level, args.out)
    cfg.validate(table.exposure_kind, table.survival)
    m, level = args.method, args.level
    if m == "add-hazards":
        return _hazards(args, table)
    gcfg = additive.GmmConfig(weight=args.weight)
    if m == "genius":
        if table.p == 1 and table.c is None:
            est = additive.genius_single(table, exposure_model=args.exposure_model, level=level)
        elif table.p == 1:
            est = additive.genius_covariates(table, level=level)
        else:
            est = additive.genius_gmm(table, replace(gcfg, exposure_model=args.exposure_model), level)
    elif m == "genius-gmm":
        est = additive.genius_gmm(table, replace(gcfg, exposure_model=args.exposure_model), level)
    elif m == "genius-efficient":
        est = additive.genius_efficient(table, scale=args.scale, config=gcfg, level=level)
    elif m == "mult-outcome":
        external = None
        if args.case_control:
            fr = _floats(args.sampling_fractions, "--sampling-fractions") or None
            if fr is not None and len(fr) != 2:
                raise DataValidationError("--sampling-fractions takes two numbers: cases,controls")
            external = link.case_control_adjust(table, rare_outcome=fr is None, sampling_fractions=fr)
        est = link.genius_mult_outcome(table, external=external, level=level)
    elif m == "mult-exposure":
        est = link.genius_mult_exposure(table, level=level)
    elif m == "odds-ratio":
        est = link.genius_odds_ratio(table, level=level)
    elif m == "tsls":
        est = baselines.tsls(table, level=level)
    elif m == "oracle-tsls":
        valid = _split(args.valid_ivs)
        if not valid:
            raise DataValidationError("oracle-tsls needs --valid-ivs")
        idx = []
        for v in valid:
            if v in table.iv_names:
                idx.append(table.iv_names.index(v))
            elif v.isdigit():
                idx.append(int(v))
            else:
                raise DataValidationError(f"--valid-ivs entry {v!r} is neither a column name nor an index")
        est = baselines.oracle_tsls(table, idx, level=level)
    elif m == "mr-egger":
        est = baselines.mr_egger(table, level=level)
    else:  # pragma: no cover - argparse restricts choices
        raise DataValidationError(f"unknown method {m}")
    result = est.to_dict()
    if args.emit_vcov:
        _write_vcov(args.emit_vcov, est)
    if args.check_bread:
        sw = getattr(est, "sandwich", None)
        if sw is None or sw.system is None:
            raise DataValidationError(f"--check-bread is not available for method {m}")
        result["bread_check"] = _bread_gap(est)
    return result


def _bread_gap(est) -> float:
    system = est.sandwich.system
    if isinstance(system, AdditiveSystem):
        return check_bread(system)
    raise DataValidationError("bread check needs the stacked additive system")


def _hazards(args, table) -> dict:
    horizons = _floats(args.horizons, "--horizons")
    cutoff = max(horizons) if horizons and not args.full_path else None
    path = survival.genius_additive_hazards(table, max_time=cutoff, on_singular=args.on_singular)
    if args.path_out:
        with open(args.path_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "B_a", "B_g"])
            for t, ba, bg, *_ in path.rows():
                w.writerow([repr(t), repr(ba), repr(bg)])
    out = {"method": "add-hazards", "n": table.n, "p": table.p, "events": int(table.delta.sum()),
           "event_times": int(path.times.size), "max_residual": path.residual,
           "truncated_at": path.truncated_at, "level": args.level}
    if horizons:
        ba, bg = survival.path_interpolate(path, np.array(horizons))
        rows = [{"time": h, "B_a": a, "B_g": g} for h, a, g in zip(horizons, ba, bg)]
        if args.bootstrap:
            band = survival.bootstrap_paths(table, horizons, B=args.bootstrap, seed=args.seed,
                                            threads=_threads(args), on_singular=args.on_singular)
            from scipy.stats import norm

            z = norm.ppf(0.5 + args.level / 2)
            for row, sa, sg in zip(rows, band.se_a, band.se_g):
                row.update(se_a=sa, se_g=sg, ci_a=[row["B_a"] - z * sa, row["B_a"] + z * sa],
                           ci_g=[row["B_g"] - z * sg, row["B_g"] + z * sg])
            out["bootstrap"] = {"replicates": args.bootstrap, "seed": args.seed, "failures": band.failures}
        out["horizons"] = rows
    return out


def _diagnose(args) -> dict:
    table = _load(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        diag = relevance_diagnostic(table, threshold=args.threshold)
    out = diag.to_dict()
    out.update(n=table.n, p=table.p, exposure_kind=table.exposure_kind.value)
    return out


def _simulate(args) -> str:
    spec = simulation.load_scenario(args.scenario)
    changes = {}
    if args.replicates is not None:
        changes["replicates"] = args.replicates
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n is not None:
        changes["n"] = args.n
    if changes:
        spec = replace(spec, **changes)
    report = simulation.run_monte_carlo(spec, threads=_threads(args))
    if args.format == "text":
        return report.text_table()
    return dumps(report.to_dict(include_runtime=args.timing))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrgenius", description="MR GENIUS instrumental-variable estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--data", required=True, help="CSV file with a header row")
        p.add_argument("--iv-cols", help="comma-separated instrument columns")
        p.add_argument("--exposure-col")
        p.add_argument("--outcome-col")
        p.add_argument("--covariate-cols")
        p.add_argument("--event-col")
        p.add_argument("--time-col")
        p.add_argument("--exposure-kind", default="auto", choices=["auto", *(k.value for k in ExposureKind)])
        p.add_argument("--level", type=float, default=0.95)
        p.add_argument("--out", help="write JSON here instead of stdout")

    est = sub.add_parser("estimate", help="estimate a causal effect")
    data_flags(est)
    est.add_argument("--method", default="genius", choices=METHODS)
    est.add_argument("--exposure-model", default="auto", choices=["auto", "saturated", "linear", "logistic"])
    est.add_argument("--weight", default="two-step", choices=["identity", "two-step", "iterated"])
    est.add_argument("--scale", default="additive", choices=["additive", "multiplicative"],
                     help="outcome scale for genius-efficient")
    est.add_argument("--emit-vcov", metavar="CSV", help="write the full sandwich covariance")
    est.add_argument("--check-bread", action="store_true", help="compare the analytic bread with finite differences")
    est.add_argument("--valid-ivs", help="oracle-tsls: valid instrument names or 0-based indices")
    est.add_argument("--case-control", action="store_true", help="mult-outcome: case-control sampling")
    est.add_argument("--sampling-fractions", help="cases,controls sampling fractions")
    est.add_argument("--horizons", help="add-hazards: comma-separated evaluation times")
    est.add_argument("--path-out", metavar="CSV", help="add-hazards: write the step functions")
    est.add_argument("--full-path", action="store_true", help="add-hazards: run past the last horizon")
    est.add_argument("--on-singular", default="error", choices=["error", "truncate"])
    est.add_argument("--bootstrap", type=int, default=0, metavar="B")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--threads", type=int)

    dia = sub.add_parser("diagnose", help="heteroscedasticity relevance check per instrument")
    data_flags(dia)
    dia.add_argument("--threshold", type=float, default=2.0)

    sim = sub.add_parser("simulate", help="Monte Carlo study from a scenario file")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--n", type=int)
    sim.add_argument("--threads", type=int)
    sim.add_argument("--format", default="json", choices=["json", "text"])
    sim.add_argument("--timing", action="store_true", help="include wall-clock runtime in the report")
    sim.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "simulate":
            _emit(_simulate(args), args.out)
        else:
            result = _estimate(args) if args.command == "estimate" else _diagnose(args)
            _emit(dumps(result), args.out)
    except DataValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except IdentificationError as exc:
        print(f"identification error: {exc}", file=sys.stderr)
        return EXIT_IDENTIFICATION
    except ConvergenceError as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except MRGeniusError as exc:  # pragma: no cover - all subclasses handled above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
