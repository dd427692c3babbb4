"""MR GENIUS on multiplicative and odds-ratio scales, plus case-control moments."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from .additive import CausalEstimate, fit_exposure_model
from .data import ExposureKind, ObservationTable, is_discrete
from .errors import DataValidationError, IdentificationError, MRGeniusError
from .inference import finite_difference_jacobian, ginv, numeric_sandwich, wald_ci
from .nuisance import (fit_exponential_mean, fit_log_mean_ratio, fit_logit_contrast,
                       logit_contrast)
from .roots import solve_moment

# |relative gap| between var(A|g)/var(A|0) and exp(varpi(g)) below which the
# multiplicative-exposure effect is treated as unidentified
VARIANCE_RATIO_TOL = 0.02


@dataclass(frozen=True, eq=False)
class LinkEstimate(CausalEstimate):
    """Log-scale effect; ``exp_beta`` and ``exp_ci`` carry the ratio scale."""

    link: str = ""

    @property
    def exp_beta(self) -> float:
        return math.exp(self.beta_hat)

    @property
    def exp_ci(self) -> tuple[float, float]:
        return tuple(math.exp(v) if np.isfinite(v) else float("nan") for v in self.ci)

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["link"] = self.link
        out["exp_beta"] = self.exp_beta
        out["exp_ci_lo"], out["exp_ci_hi"] = self.exp_ci
        return out


@dataclass(frozen=True)
class ExternalMoments:
    """Population E(G) and E(A|G=g) supplied from outside the sample."""

    e_g: float
    e_a_given_g: dict

    def __post_init__(self):
        object.__setattr__(self, "e_a_given_g", {float(k): float(v) for k, v in self.e_a_given_g.items()})

    def a_given_g(self, g) -> np.ndarray:
        g = np.ravel(g)
        try:
            return np.array([self.e_a_given_g[float(v)] for v in g])
        except KeyError as exc:
            raise DataValidationError(f"external E(A|G) has no entry for G = {exc.args[0]}") from None

    def to_dict(self) -> dict:
        return {"e_g": self.e_g, "e_a_given_g": {str(k): v for k, v in sorted(self.e_a_given_g.items())}}


def _single_iv(table, what):
    if table.p != 1:
        raise DataValidationError(f"{what} handles a single instrument (got {table.p})")
    return table.g[:, 0]


def _binary(x):
    return bool(np.all((x == 0) | (x == 1)))


def _make(beta, sandwich, method, link, table, level, diagnostics):
    se = sandwich.se if sandwich is not None else float("nan")
    return LinkEstimate(beta_hat=float(beta), se=se, ci=wald_ci(beta, se, level), method=method, n=table.n,
                        p=table.p, level=level, diagnostics=diagnostics, sandwich=sandwich, link=link)


def case_control_adjust(table: ObservationTable, rare_outcome: bool = False,
                        sampling_fractions: tuple[float, float] | None = None) -> ExternalMoments:
    """E(G) and E(A|G) for the source population of a case-control sample.

    With ``sampling_fractions = (f_cases, f_controls)`` units are weighted by the
    inverse of their sampling fraction; with ``rare_outcome`` the controls
    (Y = 0) stand in for the population.
    """
    g = _single_iv(table, "case_control_adjust")
    if not _binary(table.y):
        raise DataValidationError("case-control adjustment needs a binary outcome")
    controls = table.y == 0
    if not controls.any():
        raise DataValidationError("no controls (Y = 0) in the sample")
    if sampling_fractions is not None:
        f1, f0 = map(float, sampling_fractions)
        if not (0 < f1 <= 1 and 0 < f0 <= 1):
            raise DataValidationError("sampling fractions must lie in (0, 1]")
        w = np.where(table.y == 1, 1 / f1, 1 / f0)
    elif rare_outcome:
        w = controls.astype(float)
    else:
        raise DataValidationError("case-control adjustment needs rare_outcome=True or sampling fractions")
    if not is_discrete(g):
        raise DataValidationError("case-control moments need a discrete instrument")
    e_g = float(np.sum(w * g) / np.sum(w))
    e_a = {}
    for level in np.unique(g):
        sel = (g == level) & (w > 0)
        if not sel.any():
            raise DataValidationError(f"no weighted units at G = {level}")
        e_a[float(level)] = float(np.sum(w[sel] * table.a[sel]) / np.sum(w[sel]))
    return ExternalMoments(e_g, e_a)


def mult_outcome_moment(table: ObservationTable, beta: float, external: ExternalMoments | None = None,
                        exposure_model: str = "auto") -> float:
    """P_n[{G - E(G)}{A - E(A|G)} Y exp(-beta A)] with in-sample or external nuisances."""
    z = _mult_outcome_weights(table, external, exposure_model)[0]
    return float(np.mean(z * table.y * np.exp(-beta * table.a)))


def _mult_outcome_weights(table, external, exposure_model):
    g = _single_iv(table, "genius_mult_outcome")
    if external is not None:
        ea = external.a_given_g(g)
        if table.exposure_kind is ExposureKind.BINARY and np.any((ea < 0) | (ea > 1)):
            raise DataValidationError("external E(A|G) must lie in [0, 1] for binary exposure")
        return (g - external.e_g) * (table.a - ea), None, None
    model, x = fit_exposure_model(table, exposure_model, covariates=False)
    return (g - g.mean()) * (table.a - model.predict(x)), model, x


def genius_mult_outcome(table: ObservationTable, external: ExternalMoments | None = None,
                        exposure_model: str = "auto", level: float = 0.95) -> LinkEstimate:
    """Multiplicative outcome model: root of P_n[Z Y exp(-beta A)] with Z = {G - E(G)}{A - E(A|G)}."""
    g = _single_iv(table, "genius_mult_outcome")
    if np.any(table.y < 0):
        warnings.warn("negative outcomes under a multiplicative outcome model", RuntimeWarning, stacklevel=2)
    z, model, x = _mult_outcome_weights(table, external, exposure_model)
    a, y = table.a, table.y
    zy = z * y
    scale = np.sqrt(np.mean(zy**2) * np.mean(a**2))
    if not np.any(a) or np.max(np.abs(zy * a)) <= 1e-14 * max(np.max(np.abs(zy)), 1e-300):
        raise IdentificationError("moment does not depend on beta (exposure constant or degenerate); "
                                  "effect not identified")
    f = lambda b: float(np.mean(zy * np.exp(-b * a)))  # noqa: E731
    fp = lambda b: float(-np.mean(zy * a * np.exp(-b * a)))  # noqa: E731
    root = solve_moment(f, fp)
    weak = bool(abs(root.derivative) <= 1e-8 * max(scale, 1e-300))
    if weak:
        warnings.warn("derivative of the estimating equation is ~0 at the root", RuntimeWarning, stacklevel=2)
    beta = root.root
    if external is None:
        gm = g.mean()

        def rows(theta):
            mu, psi, b = theta[0], theta[1:-1], theta[-1]
            ea = model.predict(x, psi)
            return np.column_stack([g - mu, model.design(x) * (a - ea)[:, None],
                                    (g - mu) * (a - ea) * y * np.exp(-b * a)])

        sw = numeric_sandwich(rows, np.concatenate([[gm], model.coefficients, [beta]]))
    else:
        sw = numeric_sandwich(lambda t: (zy * np.exp(-t[0] * a))[:, None], np.array([beta]))
    return _make(beta, sw, "mult-outcome", "mult-outcome", table, level, {
        "residual": root.residual, "derivative": root.derivative, "weak_derivative": weak,
        "iterations": root.iterations, "bracket": list(root.bracket), "converged": True,
        "external_moments": external is not None,
    })


def _variance_ratio_gap(a, g, varpi):
    """max_g |var(A|g)/var(A|0) / exp(varpi g) - 1| over observed non-reference levels."""
    levels = np.unique(g)
    if not is_discrete(g) or 0.0 not in levels:
        return None
    v0 = np.var(a[g == 0])
    gaps = []
    for level in levels:
        if level == 0:
            continue
        vg = np.var(a[g == level])
        if v0 == 0:
            gaps.append(np.inf if vg > 0 else 0.0)
        else:
            gaps.append(abs(vg / v0 / np.exp(varpi * level) - 1))
    return float(max(gaps)) if gaps else None


def genius_mult_exposure(table: ObservationTable, level: float = 0.95, force_zero_log_ratio: bool = False,
                         ident_tol: float = VARIANCE_RATIO_TOL) -> LinkEstimate:
    """Multiplicative exposure model for count or binary exposure.

    beta = P_n[(G - Gbar) V Y] / P_n[(G - Gbar) V A], V = A exp(-varpi G) - P_n[A exp(-varpi G)],
    with varpi the fitted log mean ratio of A across G. The effect is on the
    additive outcome scale; ``link`` records the exposure model.
    """
    g = _single_iv(table, "genius_mult_exposure")
    a, y = table.a, table.y
    if table.exposure_kind is ExposureKind.CONTINUOUS and not np.allclose(a, np.round(a)):
        raise DataValidationError("multiplicative exposure model needs count or binary exposure")
    if np.any(a < 0):
        raise DataValidationError("multiplicative exposure model needs a non-negative exposure")
    if force_zero_log_ratio:
        varpi, fit = 0.0, None
    else:
        fit = fit_log_mean_ratio(a, g)
        varpi = float(fit.coefficients[1])
    gap = _variance_ratio_gap(a, g, varpi)
    if gap is not None and gap < ident_tol:
        raise IdentificationError(
            f"var(A|g)/var(A|0) is within {gap:.3g} of exp(varpi g) at every level (e.g. a rare binary "
            "exposure); the multiplicative-exposure effect is not identified - use the additive estimator")
    gm = g.mean()
    e = a * np.exp(-varpi * g)
    z = (g - gm) * (e - e.mean())
    den = np.mean(z * a)
    if abs(den) <= 1e-10 * np.sqrt(np.mean(z**2) * np.mean(a**2)):
        raise IdentificationError("multiplicative-exposure estimating equation is degenerate in beta")
    beta = float(np.mean(z * y) / den)

    def rows(theta):
        mu = theta[0]
        if force_zero_log_ratio:
            w, c, b = 0.0, theta[1], theta[2]
            cols = [g - mu]
        else:
            w, c, b = theta[1], theta[2], theta[3]
            cols = [g - mu, a * np.exp(-w * g) * (g - mu)]
        ew = a * np.exp(-w * g)
        cols += [ew - c, (g - mu) * (ew - c) * (y - b * a)]
        return np.column_stack(cols)

    theta = [gm, e.mean(), beta] if force_zero_log_ratio else [gm, varpi, e.mean(), beta]
    sw = numeric_sandwich(rows, np.array(theta))
    return _make(beta, sw, "mult-exposure", "mult-exposure", table, level, {
        "varpi": varpi, "variance_ratio_gap": gap, "converged": True,
        "iterations": 0 if fit is None else fit.iterations,
    })


@dataclass(frozen=True, eq=False)
class _OddsRatioNuisance:
    nu: float                 # E(G | A = 0)
    pi0: float                # E(A | G = 0)
    phi: np.ndarray           # phi_g(G_i)
    theta: np.ndarray         # nuisance parameter vector
    rows: object              # theta_nuis -> per-row nuisance moments
    unpack: object            # theta_nuis -> (nu, pi0, phi)


def _odds_ratio_nuisance(table) -> _OddsRatioNuisance:
    g, a = table.g[:, 0], table.a
    if not np.any(a == 0):
        raise IdentificationError("no unexposed units; E(G|A=0) not estimable")
    model = fit_logit_contrast(a, g)
    nu = float(g[a == 0].mean())
    if model.kind == "saturated":
        levels = np.array([lv[0] for lv in model.levels])
        idx = np.searchsorted(levels, g)
        ref = int(np.flatnonzero(levels == 0)[0])

        def unpack(t):
            p = t[1:]
            lg = logit(p)
            return t[0], p[ref], lg[idx] - lg[ref]

        def rows(t):
            p = t[1:]
            onehot = (idx[:, None] == np.arange(levels.size)[None, :]).astype(float)
            return np.column_stack([(1 - a) * (g - t[0]), onehot * (a - p[idx])[:, None]])

        theta = np.concatenate([[nu], model.coefficients])
    else:
        X = np.column_stack([np.ones_like(g), g])

        def unpack(t):
            b = t[1:]
            return t[0], expit(b[0]), b[1] * g

        def rows(t):
            b = t[1:]
            return np.column_stack([(1 - a) * (g - t[0]), X * (a - expit(X @ b))[:, None]])

        theta = np.concatenate([[nu], model.coefficients])
    nu, pi0, phi = unpack(theta)
    return _OddsRatioNuisance(float(nu), float(pi0), np.asarray(phi), theta, rows, unpack)


def odds_ratio_moment(table: ObservationTable, theta: float) -> float:
    """P_n[{G - E(G|A=0)}{A - E(A|G=0)} Y exp{-(phi_g(G) + theta) A}] at fitted nuisances."""
    nz = _odds_ratio_nuisance(table)
    g, a, y = table.g[:, 0], table.a, table.y
    return float(np.mean((g - nz.nu) * (a - nz.pi0) * y * np.exp(-(nz.phi + theta) * a)))


def genius_odds_ratio(table: ObservationTable, level: float = 0.95, min_z: float = 2.0) -> LinkEstimate:
    """Odds-ratio exposure model; closed-form root of the estimating equation.

    theta = -log(1 - P_n[w] / P_n[w A]), w = {G - E(G|A=0)}{A - E(A|G=0)} Y exp(-phi_g(G) A).
    The denominator P_n[w A] estimates a quantity that vanishes when no
    instrument has a direct effect on Y; it must be non-zero both numerically
    and at |z| >= ``min_z``. Also reports the causal-null test (moment at theta = 0).
    """
    g = _single_iv(table, "genius_odds_ratio")
    a, y = table.a, table.y
    if not _binary(a):
        raise DataValidationError("odds-ratio exposure model needs a binary exposure")
    nz = _odds_ratio_nuisance(table)
    w = (g - nz.nu) * (a - nz.pi0) * y * np.exp(-nz.phi * a)
    num, den = w.mean(), (w * a).mean()
    den_se = (w * a).std() / math.sqrt(table.n)
    scale = math.sqrt(np.mean(w**2))
    den_z = abs(den) / den_se if den_se > 0 else (math.inf if den != 0 else 0.0)
    if abs(den) <= 1e-8 * max(scale, 1e-300) or den_z < min_z:
        raise IdentificationError(
            f"odds-ratio denominator moment is indistinguishable from zero (value {den:.3g}, |z| = {den_z:.2f}); "
            "the effect is not identified when no instrument has a direct effect on the outcome")
    arg = 1 - num / den
    if arg <= 0:
        raise IdentificationError(f"no root: 1 - num/den = {arg:.3g} <= 0")
    theta_hat = -math.log(arg)

    k = nz.theta.size

    def rows(t):
        nu, pi0, phi = nz.unpack(t[:k])
        final = (g - nu) * (a - pi0) * y * np.exp(-(phi + t[k]) * a)
        return np.column_stack([nz.rows(t[:k]), final])

    full = np.concatenate([nz.theta, [theta_hat]])
    sw = numeric_sandwich(rows, full)
    null = _null_test(rows, np.concatenate([nz.theta, [0.0]]), k)
    return _make(theta_hat, sw, "odds-ratio", "odds-ratio-exposure", table, level, {
        "numerator": float(num), "denominator": float(den), "denominator_z": float(den_z),
        "converged": True, "iterations": 0, "causal_null_test": null,
    })


def _null_test(rows, theta, k):
    """Moment at theta = 0 with its nuisance-corrected standard error."""
    m = rows(theta)
    n = m.shape[0]
    u = m[:, -1]
    mean_fn = lambda t: rows(np.concatenate([t, theta[k:]])).mean(axis=0)  # noqa: E731
    J = finite_difference_jacobian(mean_fn, theta[:k])
    binv, _ = ginv(J[:-1])
    infl = u - m[:, :-1] @ (J[-1] @ binv).T
    se = float(np.std(infl) / math.sqrt(n))
    stat = float(u.mean())
    z = stat / se if se > 0 else float("nan")
    return {"moment": stat, "se": se, "z": z, "p_value": float(2 * stats.norm.sf(abs(z)))}


def genius_efficient_multiplicative(table: ObservationTable, level: float = 0.95) -> LinkEstimate:
    """Efficient variant on the multiplicative outcome scale.

    Solves P_n[Z Y exp(-beta A) mu(0; beta)/mu(G; beta)] = 0 where mu(.; beta)
    is a log-linear regression of Y exp(-beta A) on G refitted at each beta.
    """
    first = genius_mult_outcome(table, level=level)
    g = _single_iv(table, "genius_efficient")
    a, y = table.a, table.y
    model, x = fit_exposure_model(table, "auto", covariates=False)
    z = (g - g.mean()) * (a - model.predict(x))

    def eta_at(b):
        return fit_exponential_mean(y * np.exp(-b * a), g).coefficients

    def f(b):
        eta = eta_at(b)
        return float(np.mean(z * y * np.exp(-b * a) * np.exp(-eta[1] * g)))

    try:
        root = solve_moment(f, None, lo=first.beta_hat - 3, hi=first.beta_hat + 3,
                            max_abs=max(30.0, abs(first.beta_hat) + 30), prefer=first.beta_hat)
        eta = eta_at(root.root)
    except MRGeniusError as exc:
        warnings.warn(f"outcome model fit failed ({exc}); returning the first-pass estimate",
                      RuntimeWarning, stacklevel=2)
        return first
    beta = root.root
    Xmu = np.column_stack([np.ones_like(g), g])
    q = model.coefficients.size

    def rows(t):
        mu, psi, e, b = t[0], t[1:1 + q], t[1 + q:3 + q], t[-1]
        ea = model.predict(x, psi)
        t0 = y * np.exp(-b * a)
        return np.column_stack([g - mu, model.design(x) * (a - ea)[:, None],
                                Xmu * (t0 - np.exp(Xmu @ e))[:, None],
                                (g - mu) * (a - ea) * t0 * np.exp(-e[1] * g)])

    sw = numeric_sandwich(rows, np.concatenate([[g.mean()], model.coefficients, eta, [beta]]))
    return _make(beta, sw, "genius-efficient", "mult-outcome", table, level, {
        "first_pass_beta": first.beta_hat, "residual": root.residual, "converged": True,
        "iterations": root.iterations, "outcome_model": "exponential-mean",
    })
