"""Recursive additive-hazards estimator of cumulative exposure and instrument effects."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .additive import fit_exposure_model
from .data import ObservationTable
from .errors import DataValidationError, IdentificationError, MRGeniusError

# condition number of M(s) beyond which the step is declared singular
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class CumulativeEffectPath:
    """Right-continuous step functions B_a, B_g that jump at distinct event times."""

    times: np.ndarray
    B_a: np.ndarray
    B_g: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    residual: float = 0.0
    truncated_at: float | None = None

    def __post_init__(self):
        for name in ("times", "B_a", "B_g", "at_risk", "events"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __call__(self, y) -> tuple[np.ndarray, np.ndarray]:
        return path_interpolate(self, y)

    def rows(self) -> list[tuple[float, float, float, int, int]]:
        return [(float(t), float(a), float(g), int(r), int(d))
                for t, a, g, r, d in zip(self.times, self.B_a, self.B_g, self.at_risk, self.events)]

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "B_a": self.B_a.tolist(), "B_g": self.B_g.tolist(),
                "at_risk": self.at_risk.astype(int).tolist(), "events": self.events.astype(int).tolist(),
                "max_residual": self.residual, "truncated_at": self.truncated_at}


def path_interpolate(path: CumulativeEffectPath, y):
    """(B_a(y), B_g(y)) including any jump at y itself; zero before the first event."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr < 0):
        raise DataValidationError("evaluation times must be non-negative")
    idx = np.searchsorted(path.times, y_arr, side="right") - 1
    if path.times.size == 0:
        ba = bg = np.zeros_like(y_arr)
    else:
        safe = np.maximum(idx, 0)
        ba = np.where(idx >= 0, path.B_a[safe], 0.0)
        bg = np.where(idx >= 0, path.B_g[safe], 0.0)
    if y_arr.ndim == 0:
        return float(ba), float(bg)
    return ba, bg


def _weights(table: ObservationTable) -> np.ndarray:
    """h(G, A) = ((G - Gbar), (G - Gbar)(A - E(A|G))) per unit, shape (n, 2)."""
    g = table.g[:, 0]
    model, x = fit_exposure_model(table, "auto", covariates=False)
    gc = g - g.mean()
    return np.column_stack([gc, gc * (table.a - model.predict(x))])


def genius_additive_hazards(table: ObservationTable, max_time: float | None = None,
                            on_singular: str = "error") -> CumulativeEffectPath:
    """Forward recursion over distinct event times.

    At each event time s the increment solves
    P_n[h e dN(s)] = P_n[h (A, G) R(s) e] (dB_a, dB_g)' with e = exp{B_a(s-) A + B_g(s-) G};
    tied events form one step. Event times beyond ``max_time`` are skipped.
    A singular M(s) raises, unless ``on_singular="truncate"``, in which case
    the path stops just before s and ``truncated_at`` records s.
    """
    if on_singular not in ("error", "truncate"):
        raise ValueError(f"unknown on_singular mode {on_singular!r}")
    if not table.survival:
        raise DataValidationError("additive hazards estimation needs an event indicator")
    if table.p != 1:
        raise DataValidationError(f"the survival recursion handles a single instrument (got {table.p})")
    g, a, t, d = table.g[:, 0], table.a, table.y, table.delta
    event_times = np.unique(t[d == 1])
    if max_time is not None:
        event_times = event_times[event_times <= max_time]
    if event_times.size == 0:
        z = np.zeros(0)
        return CumulativeEffectPath(z, z, z, z, z)
    h = _weights(table)
    ag = np.column_stack([a, g])
    order = np.argsort(t, kind="stable")
    t_sorted = t[order]
    h_s, ag_s, d_s = h[order], ag[order], d[order]
    n = table.n
    b = np.zeros(2)
    out_a, out_g, risk, counts = [], [], [], []
    worst = 0.0
    truncated = None
    for s in event_times:
        start = np.searchsorted(t_sorted, s, side="left")
        stop = np.searchsorted(t_sorted, s, side="right")
        e = np.exp(ag_s[start:] @ b)
        he = h_s[start:] * e[:, None]
        # (h (A,G)') summed over the risk set, i.e. M(s) transposed
        lhs = he.T @ ag_s[start:] / n
        jump = d_s[start:stop] == 1
        rhs = he[: stop - start][jump].sum(axis=0) / n
        cond = np.linalg.cond(lhs) if np.all(np.isfinite(lhs)) else math.inf
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            if on_singular == "truncate":
                truncated = float(s)
                break
            raise IdentificationError(
                f"M(s) is singular at event time {s:g} (condition number {cond:.3g}); "
                "increments are not identified")
        db = np.linalg.solve(lhs, rhs)
        worst = max(worst, float(np.max(np.abs(lhs @ db - rhs))))
        b = b + db
        out_a.append(b[0])
        out_g.append(b[1])
        risk.append(n - start)
        counts.append(int(jump.sum()))
    kept = event_times[: len(out_a)]
    return CumulativeEffectPath(kept, out_a, out_g, risk, counts, residual=worst, truncated_at=truncated)


@dataclass(frozen=True, eq=False)
class BootstrapBand:
    horizons: np.ndarray
    B_a: np.ndarray
    B_g: np.ndarray
    se_a: np.ndarray
    se_g: np.ndarray
    replicates_a: np.ndarray
    replicates_g: np.ndarray
    failures: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"horizons": self.horizons.tolist(), "B_a": self.B_a.tolist(), "B_g": self.B_g.tolist(),
                "se_a": self.se_a.tolist(), "se_g": self.se_g.tolist(),
                "replicates": int(self.replicates_a.shape[0]), "failures": self.failures}


def default_threads() -> int:
    env = os.environ.get("MRGENIUS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataValidationError(f"MRGENIUS_THREADS must be an integer, got {env!r}") from None
    return 1


def bootstrap_paths(table: ObservationTable, horizons, B: int = 200, seed: int = 0,
                    threads: int | None = None, on_singular: str = "error") -> BootstrapBand:
    """Nonparametric bootstrap over units; SEs of (B_a, B_g) at each horizon.

    Each resample uses its own stream spawned from ``seed``, so the result does
    not depend on ``threads``. The recursion only runs up to the largest
    horizon. Resamples whose recursion fails are dropped and counted.
    """
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    cutoff = float(horizons.max())
    path = genius_additive_hazards(table, cutoff, on_singular)
    ba, bg = path_interpolate(path, horizons)
    seqs = np.random.SeedSequence(seed).spawn(B)

    def one(ss):
        idx = np.random.default_rng(ss).integers(0, table.n, table.n)
        try:
            p = genius_additive_hazards(table.take(idx), cutoff, on_singular)
        except MRGeniusError:
            return None
        return path_interpolate(p, horizons)

    threads = threads or default_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, seqs))
    else:
        results = [one(ss) for ss in seqs]
    kept = [r for r in results if r is not None]
    if len(kept) < 2:
        raise IdentificationError("fewer than two bootstrap resamples produced a path")
    ra = np.array([r[0] for r in kept])
    rg = np.array([r[1] for r in kept])
    return BootstrapBand(horizons, np.asarray(ba), np.asarray(bg), ra.std(axis=0, ddof=1),
                         rg.std(axis=0, ddof=1), ra, rg, failures=len(results) - len(kept))


def simulate_additive_hazards(n: int, beta_a: float = 0.3, beta_g: float = 0.2, beta_0: float = 0.5,
                              censor_fraction: float = 0.3, seed: int | None = 0) -> ObservationTable:
    """Constant-coefficient additive hazards data with a heteroscedastic exposure.

    G ~ Bernoulli(0.5), U ~ Uniform(0, 1), A = (0.5 + 1.5 G) E + U with
    E ~ Exponential(1), so var(A|G) grows with G and U confounds A and Y.
    The hazard beta_0 + beta_a A + beta_g G + 0.3 U is constant in time.
    Censoring is exponential with a rate chosen so that about
    ``censor_fraction`` of units are censored.
    """
    rng = np.random.default_rng(seed)
    g = rng.binomial(1, 0.5, n).astype(float)
    u = rng.uniform(0, 1, n)
    a = (0.5 + 1.5 * g) * rng.exponential(1.0, n) + u
    rate = beta_0 + beta_a * a + beta_g * g + 0.3 * u
    if np.any(rate <= 0):
        raise DataValidationError("hazard must be positive for every unit")
    event = rng.exponential(1 / rate)
    if censor_fraction > 0:
        crate = _censoring_rate(rate, censor_fraction)
        cens = rng.exponential(1 / crate, n)
    else:
        cens = np.full(n, np.inf)
    y = np.minimum(event, cens)
    delta = (event <= cens).astype(float)
    return ObservationTable(g=g, a=a, y=y, delta=delta, exposure_kind="continuous")


def _censoring_rate(rate: np.ndarray, fraction: float) -> float:
    """c with mean_i c / (c + rate_i) = fraction (exponential censoring vs exponential events)."""
    from scipy.optimize import brentq

    return brentq(lambda c: np.mean(c / (c + rate)) - fraction, 1e-12, 1e12 * rate.max())
