"""Monte Carlo designs with invalid instruments and a seeded replicate harness."""

from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats
from scipy.special import expit

from .data import ObservationTable
from .errors import DataValidationError, MRGeniusError

TAGS = ("TTT", "TTF", "TFF")


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation design.

    Single-instrument designs (p = 1) use scalar ``alpha``/``phi``/``gamma``;
    with p = 10 the coefficient vectors follow the 3/6/10-invalid layouts and
    ``gamma`` is drawn per replicate from ``gamma_range``. ``tag`` says which
    of relevance / independence / exclusion hold: TTF breaks exclusion
    (alpha != 0), TFF also breaks independence (phi != 0).

    For binary exposure the success probability is shifted by U - E(U|G)
    (``u_centering="conditional"``) or by U - E(U) (``"marginal"``); the
    latter lets phi move the exposure mean as well.
    """

    exposure: str = "continuous"
    n: int = 500
    p: int = 1
    invalid: int | None = None
    tag: str = "TTT"
    beta: float = 0.5
    alpha: float = -0.5
    phi: float | None = None
    gamma: float | None = None
    gamma_range: tuple[float, float] | None = None
    lambda0: float = 1.0
    lambda1: float | None = None
    trunc_a: float = 0.2
    trunc_b: float = 0.5
    trunc_mu: float = 0.35
    trunc_sigma: float = 1.0
    replicates: int = 200
    seed: int = 0
    estimators: tuple[str, ...] = ("genius", "tsls")
    u_centering: str = "conditional"
    name: str = ""

    def __post_init__(self):
        if self.exposure not in ("binary", "continuous"):
            raise DataValidationError(f"exposure must be binary or continuous, got {self.exposure!r}")
        if self.tag not in TAGS:
            raise DataValidationError(f"tag must be one of {TAGS}, got {self.tag!r}")
        if self.p < 1 or self.n < 2 or self.replicates < 1:
            raise DataValidationError("need p >= 1, n >= 2 and at least one replicate")
        invalid = self.invalid
        if self.p == 1:
            expected = 0 if self.tag == "TTT" else 1
            if invalid is not None and invalid != expected:
                raise DataValidationError(f"single-IV tag {self.tag} implies {expected} invalid instrument(s)")
            invalid = expected
        else:
            if invalid is None:
                invalid = 0 if self.tag == "TTT" else 3
            if invalid not in (0, 3, 6, 10) or invalid > self.p:
                raise DataValidationError(f"invalid count must be 0, 3, 6 or 10 (and <= p), got {invalid}")
            if (invalid == 0) != (self.tag == "TTT"):
                raise DataValidationError(f"tag {self.tag} is inconsistent with {invalid} invalid instruments")
            if self.p != 10 and invalid in (6, 10):
                raise DataValidationError("the 6/10-invalid layouts are defined for p = 10")
        object.__setattr__(self, "_invalid_count", invalid)
        if self.u_centering not in ("conditional", "marginal"):
            raise DataValidationError("u_centering must be 'conditional' or 'marginal'")
        if not (self.trunc_a < self.trunc_b and self.trunc_sigma > 0):
            raise DataValidationError("truncation bounds need a < b and sigma > 0")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.gamma_range is not None:
            object.__setattr__(self, "gamma_range", tuple(map(float, self.gamma_range)))

    @property
    def invalid_count(self) -> int:
        """Number of invalid instruments implied by ``invalid`` and ``tag``."""
        return self._invalid_count

    @property
    def binary(self) -> bool:
        return self.exposure == "binary"

    def default_gamma(self) -> float:
        return -1.0 if self.gamma is None else float(self.gamma)

    def default_phi(self) -> float:
        if self.phi is not None:
            return float(self.phi)
        return -0.2 if self.binary else -2.0

    def label(self) -> str:
        return self.name or f"{self.exposure}-p{self.p}-{self.invalid_count}inv-{self.tag}-n{self.n}"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["invalid_count"] = self.invalid_count
        out["estimators"] = list(self.estimators)
        if self.gamma_range is not None:
            out["gamma_range"] = list(self.gamma_range)
        return out


@dataclass(frozen=True)
class Parameters:
    """Coefficient vectors realised for one replicate."""

    alpha: np.ndarray
    phi: np.ndarray
    gamma: np.ndarray
    lambda1: np.ndarray


_LAYOUT = {
    3: {"alpha": -0.5 * np.array([1, 1, 1]), "phi_c": -0.25 * np.array([1, 1, 1]),
        "phi_b": -0.05 * np.array([1, 1, 1])},
    6: {"alpha": -0.25 * np.array([1, 1, 2, 2, 4, 4]), "phi_c": -0.25 * np.array([0.5, 0.5, 1, 1, 2, 2]),
        "phi_b": -0.01 * np.array([1, 1, 3, 3, 5, 5])},
}


def draw_parameters(spec: ScenarioSpec, rng: np.random.Generator) -> Parameters:
    p = spec.p
    alpha = np.zeros(p)
    phi = np.zeros(p)
    if p == 1:
        gamma = np.array([spec.default_gamma()])
        lam = np.array([1.0 if spec.lambda1 is None else spec.lambda1])
        if spec.tag != "TTT":
            alpha[0] = spec.alpha
        if spec.tag == "TFF":
            phi[0] = spec.default_phi()
        return Parameters(alpha, phi, gamma, lam)
    lo, hi = spec.gamma_range or ((-0.15, -0.05) if spec.binary else (-3.0, -2.0))
    gamma = rng.uniform(lo, hi, p)
    lam = np.full(p, 0.5 if spec.lambda1 is None else spec.lambda1)
    k = spec.invalid_count
    if k in _LAYOUT:
        layout = _LAYOUT[k]
        alpha[:k] = layout["alpha"]
        if spec.tag == "TFF":
            phi[:k] = layout["phi_b" if spec.binary else "phi_c"]
    elif k == 10:
        alpha[:] = rng.uniform(-2.0, -0.5, p)
        if spec.tag == "TFF":
            phi[:] = rng.uniform(-0.02, -0.01, p) if spec.binary else rng.uniform(-2.0, -0.5, p)
    return Parameters(alpha, phi, gamma, lam)


def truncated_normal_sample(a: float, b: float, mu: float, sigma: float, rng: np.random.Generator,
                            size=None):
    """Inverse-CDF draw from N(mu, sigma^2) restricted to [a, b]."""
    if not (a <= b and sigma > 0):
        raise ValueError("need a <= b and sigma > 0")
    lo = stats.norm.cdf((a - mu) / sigma)
    hi = stats.norm.cdf((b - mu) / sigma)
    u = rng.uniform(size=size)
    x = stats.norm.ppf(lo + u * (hi - lo)) * sigma + mu
    return np.clip(x, a, b)


def truncated_normal_mean(a: float, b: float, mu: float, sigma: float) -> float:
    al, be = (a - mu) / sigma, (b - mu) / sigma
    z = stats.norm.cdf(be) - stats.norm.cdf(al)
    return float(mu + sigma * (stats.norm.pdf(al) - stats.norm.pdf(be)) / z)


@dataclass(frozen=True, eq=False)
class SimulatedData:
    table: ObservationTable
    parameters: Parameters
    clipped: int


def generate(spec: ScenarioSpec, seed) -> SimulatedData:
    """One data set; ``seed`` is anything ``numpy.random.default_rng`` accepts."""
    rng = np.random.default_rng(seed)
    n, p = spec.n, spec.p
    par = draw_parameters(spec, rng)
    G = rng.binomial(1, 0.5, (n, p)).astype(float)
    clipped = 0
    if spec.binary:
        eps = truncated_normal_sample(spec.trunc_a, spec.trunc_b, spec.trunc_mu, spec.trunc_sigma, rng, n)
        U = G @ par.phi + eps
        shift = eps - truncated_normal_mean(spec.trunc_a, spec.trunc_b, spec.trunc_mu, spec.trunc_sigma)
        if spec.u_centering == "marginal":
            shift = shift + (G - 0.5) @ par.phi
        prob = expit(G @ par.gamma) + shift
        outside = (prob < 0) | (prob > 1)
        clipped = int(outside.sum())
        A = rng.binomial(1, np.clip(prob, 0, 1)).astype(float)
    else:
        U = G @ par.phi + rng.standard_normal(n)
        A = G @ par.gamma + U + np.abs(spec.lambda0 + G @ par.lambda1) * rng.standard_normal(n)
    Y = G @ par.alpha + spec.beta * A + U + rng.standard_normal(n)
    table = ObservationTable(g=G, a=A, y=Y, exposure_kind="binary" if spec.binary else "continuous")
    return SimulatedData(table, par, clipped)


def valid_ivs(spec: ScenarioSpec) -> list[int]:
    return list(range(spec.invalid_count, spec.p))


def _registry() -> dict[str, Callable[[ObservationTable, ScenarioSpec], float]]:
    from . import additive, baselines

    def genius(t, s):
        if t.p == 1:
            return additive.genius_single(t, variance=False).beta_hat
        return additive.genius_gmm(t).beta_hat

    def oracle(t, s):
        return baselines.oracle_tsls(t, valid_ivs(s)).beta_hat

    return {
        "genius": genius,
        "genius-gmm": lambda t, s: additive.genius_gmm(t).beta_hat,
        "genius-efficient": lambda t, s: additive.genius_efficient(t).beta_hat,
        "tsls": lambda t, s: baselines.tsls(t).beta_hat,
        "oracle-tsls": oracle,
        "mr-egger": lambda t, s: baselines.mr_egger(t).beta_hat,
    }


ESTIMATORS = tuple(_registry())


@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    median_abs_bias: float
    robust_sd: float
    mean: float
    median: float
    replicates: int
    failures: int
    failure_messages: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class MonteCarloReport:
    spec: ScenarioSpec
    summaries: dict
    estimates: dict
    clipped: int
    draws: int
    runtime: float = 0.0

    def to_dict(self, include_runtime: bool = False) -> dict:
        out = {
            "scenario": self.spec.to_dict(),
            "label": self.spec.label(),
            "estimators": {k: {f.name: getattr(v, f.name) if f.name != "failure_messages"
                               else list(v.failure_messages) for f in fields(v)}
                           for k, v in self.summaries.items()},
            "clipped_probabilities": self.clipped,
            "clip_rate": self.clipped / self.draws if self.draws else 0.0,
        }
        if include_runtime:
            out["runtime_seconds"] = self.runtime
        return out

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), sort_keys=True, indent=2) + "\n"

    def text_table(self) -> str:
        lines = [f"{self.spec.label()}  (beta = {self.spec.beta}, replicates = {self.spec.replicates})",
                 f"{'estimator':<18}{'median |bias|':>15}{'robust SD':>12}{'failures':>10}"]
        for name, s in self.summaries.items():
            lines.append(f"{name:<18}{s.median_abs_bias:>15.2f}{s.robust_sd:>12.2f}{s.failures:>10d}")
        return "\n".join(lines) + "\n"


def robust_sd(values) -> float:
    """IQR / 1.349 with linearly interpolated (type-7) quantiles."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan")
    q25, q75 = np.quantile(values, [0.25, 0.75])
    return float((q75 - q25) / 1.349)


def median_abs_bias(values, truth: float) -> float:
    """|median(estimates) - truth|."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan")
    return float(abs(np.median(values) - truth))


def summarize(name: str, values, failures: int, truth: float, messages=()) -> EstimatorSummary:
    values = np.asarray(values, dtype=float)
    finite = values.size > 0
    return EstimatorSummary(name, median_abs_bias(values, truth), robust_sd(values),
                            float(values.mean()) if finite else float("nan"),
                            float(np.median(values)) if finite else float("nan"),
                            int(values.size), int(failures), tuple(sorted(set(messages)))[:5])


def replicate_rng_seed(seed: int, r: int) -> np.random.SeedSequence:
    """Independent stream for replicate r, fixed by (seed, r) alone."""
    return np.random.SeedSequence(seed, spawn_key=(r,))


def run_monte_carlo(spec: ScenarioSpec, estimators=None, threads: int = 1,
                    extra_estimators: dict | None = None) -> MonteCarloReport:
    """Run ``spec.replicates`` replicates and summarise each estimator.

    A replicate on which an estimator raises is counted as a failure for that
    estimator and left out of its quantiles.
    """
    registry = _registry()
    registry.update(extra_estimators or {})
    names = tuple(estimators) if estimators is not None else spec.estimators
    unknown = [e for e in names if e not in registry]
    if unknown:
        raise DataValidationError(f"unknown estimator(s): {', '.join(unknown)}")
    start = time.perf_counter()

    def one(r):
        data = generate(spec, replicate_rng_seed(spec.seed, r))
        row = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for name in names:
                try:
                    value = float(registry[name](data.table, spec))
                    row[name] = value if math.isfinite(value) else ValueError("non-finite estimate")
                except (MRGeniusError, ValueError, np.linalg.LinAlgError) as exc:
                    row[name] = exc
        return row, data.clipped

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(spec.replicates)))
    else:
        results = [one(r) for r in range(spec.replicates)]
    summaries, estimates = {}, {}
    for name in names:
        vals = [row[name] for row, _ in results if not isinstance(row[name], Exception)]
        errs = [f"{type(row[name]).__name__}: {row[name]}" for row, _ in results
                if isinstance(row[name], Exception)]
        estimates[name] = np.array(vals)
        summaries[name] = summarize(name, vals, len(errs), spec.beta, errs)
    clipped = sum(c for _, c in results)
    return MonteCarloReport(spec, summaries, estimates, clipped, spec.replicates * spec.n,
                            time.perf_counter() - start)


_TUPLE_FIELDS = {"estimators", "gamma_range"}


def parse_scenario(text: str) -> ScenarioSpec:
    """``key = value`` lines (``#`` comments) naming ScenarioSpec fields."""
    types = {f.name: f.type for f in fields(ScenarioSpec)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataValidationError(f"scenario line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise DataValidationError(f"scenario line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, value, types[key])
        except ValueError as exc:
            raise DataValidationError(f"scenario line {lineno}: bad value for {key}: {exc}") from None
    return ScenarioSpec(**values)


def _coerce(key, value, annotation):
    if key == "estimators":
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if key == "gamma_range":
        parts = [float(v) for v in value.split(",")]
        if len(parts) != 2:
            raise ValueError("expected two comma-separated numbers")
        return tuple(parts)
    if value.lower() in ("none", ""):
        return None
    ann = str(annotation)
    if ann.startswith("int"):
        return int(value)
    if ann.startswith("float"):
        return float(value)
    return value


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataValidationError(f"cannot read scenario file {path}: {exc.strerror}") from None
    spec = parse_scenario(text)
    return spec if spec.name else replace(spec, name=path.stem)
