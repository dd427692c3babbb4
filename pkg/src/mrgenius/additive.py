"""Additive-scale MR GENIUS estimators.

All of them are built on the moment

    U_i(beta) = {h_i - E(h|C)_i} {A_i - E(A|G,C)_i} (Y_i - beta A_i),

which is linear in beta, so every point estimate has a closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import inference
from .data import ExposureKind, ObservationTable, is_discrete, relevance_diagnostic
from .errors import DataValidationError, IdentificationError, MRGeniusError
from .inference import AdditiveSystem, EfficientPart, SandwichParts, ginv, wald_ci
from .nuisance import (NuisanceModel, fit_default, fit_linear, fit_saturated)

# relative size below which a ratio denominator counts as zero
IDENT_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CausalEstimate:
    beta_hat: float
    se: float
    ci: tuple[float, float]
    method: str
    n: int
    p: int
    level: float = 0.95
    diagnostics: dict = field(default_factory=dict)
    sandwich: SandwichParts | None = field(default=None, repr=False)

    @property
    def covariance(self) -> np.ndarray | None:
        return None if self.sandwich is None else self.sandwich.covariance

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "beta": self.beta_hat,
            "se": self.se,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "level": self.level,
            "phi_hat": self.diagnostics.get("phi_hat"),
            "n": self.n,
            "p": self.p,
        }
        extra = {k: v for k, v in self.diagnostics.items() if k != "phi_hat"}
        if extra:
            out["diagnostics"] = extra
        return out


@dataclass(frozen=True)
class GmmConfig:
    """Options for the multi-instrument estimator.

    ``h`` maps the (n, p) instrument matrix to the (n, K) moment instruments;
    None means h(G) = G. ``weight`` is "identity", "two-step" or "iterated".
    """

    h: Callable[[np.ndarray], np.ndarray] | None = None
    weight: str = "two-step"
    K: int | None = None
    max_iter: int = 10
    tol: float = 1e-10
    center: bool = True
    exposure_model: str = "auto"

    def __post_init__(self):
        if self.weight not in ("identity", "two-step", "iterated"):
            raise ValueError(f"unknown weight scheme {self.weight!r}")
        if self.K is not None and self.K < 1:
            raise ValueError("moment dimension K must be at least 1")


def _binary(x) -> bool:
    x = np.asarray(x)
    return bool(np.all((x == 0) | (x == 1)))


def fit_exposure_model(table: ObservationTable, model: str = "auto",
                       covariates: bool = True) -> tuple[NuisanceModel, np.ndarray]:
    """E(A|G[,C]): logistic for binary exposure, linear otherwise, or saturated on request.

    Returns the model and the conditioning matrix it was fitted on.
    """
    x = table.g if (table.c is None or not covariates) else np.column_stack([table.g, table.c])
    names = table.iv_names + (table.covariate_names if table.c is not None and covariates else ())
    binary = table.exposure_kind is ExposureKind.BINARY or _binary(table.a)
    if model == "auto":
        model = "logistic" if binary else "linear"
    if model == "saturated":
        if not is_discrete(x):
            raise DataValidationError("saturated exposure model needs discrete conditioning variables")
        return fit_saturated(table.a, x, names=names), x
    if model == "logistic":
        return fit_default(table.a, x, binary=True, names=names), x
    if model == "linear":
        return fit_linear(table.a, x, names=names), x
    raise ValueError(f"unknown exposure model {model!r}")


def _instrument_models(H, c, model="auto"):
    """E(H_j|C) per column: intercept-only without covariates."""
    n = H.shape[0]
    if c is None:
        return [NuisanceModel("linear", np.array([col.mean()])) for col in H.T], np.empty((n, 0))
    models = []
    for col in H.T:
        if model == "saturated":
            models.append(fit_saturated(col, c))
        else:
            models.append(fit_default(col, c, binary=_binary(col)))
    return models, c


def _check_denominator(den, Z, a, what="cov{G, var(A|G)} != 0"):
    scale = np.sqrt(np.mean(Z**2) * np.mean(a**2))
    if not np.isfinite(den) or abs(den) <= IDENT_TOL * max(scale, np.finfo(float).tiny):
        raise IdentificationError(f"estimating equation is degenerate in beta (denominator {den:.3g}); "
                                  f"heteroscedasticity condition {what} fails")


def _finalize(beta, sandwich, method, table, level, diagnostics):
    se = sandwich.se if sandwich is not None else float("nan")
    return CausalEstimate(beta_hat=float(beta), se=se, ci=wald_ci(beta, se, level), method=method,
                          n=table.n, p=table.p, level=level, diagnostics=diagnostics, sandwich=sandwich)


def genius_single(table: ObservationTable, exposure_model: str = "auto", level: float = 0.95,
                  variance: bool = True) -> CausalEstimate:
    """Closed-form single-instrument estimator.

    beta = P_n[(G - Gbar)(A - E(A|G)) Y] / P_n[(G - Gbar)(A - E(A|G)) A]
    """
    if table.p != 1:
        raise DataValidationError(f"genius_single needs exactly one instrument (got {table.p}); use genius_gmm")
    diag = relevance_diagnostic(table)
    model, x = fit_exposure_model(table, exposure_model, covariates=False)
    g = table.g[:, 0]
    Z = (g - g.mean()) * (table.a - model.predict(x))
    den = np.mean(Z * table.a)
    _check_denominator(den, Z, table.a)
    beta = np.mean(Z * table.y) / den
    sw = inference.sandwich_single(g, table.a, table.y, model, beta) if variance else None
    return _finalize(beta, sw, "genius", table, level, {
        "phi_hat": diag.phi_hat, "phi_z": float(diag.z[0]), "weak": diag.flagged[0],
        "converged": True, "iterations": 0, "objective": 0.0, "exposure_model": model.kind,
    })


def genius_single_lewbel(table: ObservationTable, level: float = 0.95) -> CausalEstimate:
    """Two-step form: OLS residuals of A on G, then TSLS of Y on A with (G - Gbar) residual as instrument."""
    from .baselines import tsls_core

    if table.p != 1:
        raise DataValidationError("the two-step form needs exactly one instrument")
    diag = relevance_diagnostic(table)
    g = table.g[:, 0]
    first = fit_linear(table.a, g)
    resid = table.a - first.predict(g)
    instrument = (g - g.mean()) * resid
    _check_denominator(np.mean(instrument * table.a), instrument, table.a)
    fit = tsls_core(table.y, endog=table.a[:, None], instruments=instrument[:, None])
    beta = float(fit["coef"][-1])
    sw = inference.sandwich_single(g, table.a, table.y, first, beta)
    return _finalize(beta, sw, "genius-lewbel", table, level, {
        "phi_hat": diag.phi_hat, "converged": True, "iterations": 0, "objective": 0.0,
    })


def genius_covariates(table: ObservationTable, h: Callable[[np.ndarray], np.ndarray] | None = None,
                      nuisance: str = "auto", level: float = 0.95) -> CausalEstimate:
    """Covariate-adjusted estimator solving P_n[h(C){G - E(G|C)}{A - E(A|G,C)}(Y - beta A)] = 0.

    ``nuisance`` selects "auto" (logistic/linear GLMs) or "saturated" fits for
    both E(G|C) and E(A|G,C).
    """
    if table.c is None:
        raise DataValidationError("genius_covariates needs covariates")
    if table.p != 1:
        raise DataValidationError("genius_covariates handles one instrument; use genius_gmm for several")
    diag = relevance_diagnostic(table, warn=False)
    inst_models, cx = _instrument_models(table.g, table.c, "saturated" if nuisance == "saturated" else "auto")
    a_model, ax = fit_exposure_model(table, "saturated" if nuisance == "saturated" else "auto")
    w = np.ones(table.n) if h is None else np.asarray(h(table.c), float).reshape(-1)
    gres = table.g[:, 0] - inst_models[0].predict(cx)
    Z = w * gres * (table.a - a_model.predict(ax))
    den = np.mean(Z * table.a)
    _check_denominator(den, Z, table.a, "cov{G, var(A|G,C) | C} != 0")
    beta = np.mean(Z * table.y) / den
    system = AdditiveSystem(H=table.g, a=table.a, y=table.y, inst_models=inst_models, inst_x=cx,
                            a_model=a_model, a_x=ax, beta=beta, row_weight=w)
    return _finalize(beta, system.sandwich(), "genius-covariates", table, level, {
        "phi_hat": diag.phi_hat, "converged": True, "iterations": 0, "objective": 0.0,
        "exposure_model": a_model.kind, "iv_model": inst_models[0].kind,
    })


@dataclass(frozen=True, eq=False)
class _GmmPieces:
    H: np.ndarray
    Z: np.ndarray
    inst_models: list
    inst_x: np.ndarray
    a_model: NuisanceModel
    a_x: np.ndarray


def _gmm_pieces(table: ObservationTable, config: GmmConfig) -> _GmmPieces:
    H = table.g if config.h is None else np.asarray(config.h(table.g), float)
    if H.ndim == 1:
        H = H[:, None]
    if config.K is not None and H.shape[1] != config.K:
        raise DataValidationError(f"h returned {H.shape[1]} columns, config says K = {config.K}")
    inst_models, cx = _instrument_models(H, table.c)
    a_model, ax = fit_exposure_model(table, config.exposure_model)
    E = np.column_stack([m.predict(cx) for m in inst_models])
    Z = (H - E) * (table.a - a_model.predict(ax))[:, None]
    return _GmmPieces(H, Z, inst_models, cx, a_model, ax)


def gmm_solve(Z: np.ndarray, y: np.ndarray, a: np.ndarray, config: GmmConfig, offset=None):
    """Minimise P_n[U]'W P_n[U] for U = Z (y - offset - beta a).

    Returns (beta, W, diagnostics). The moments are linear in beta, so each
    weighted step is the closed form b'W c / b'W b with b = P_n[Z a].
    """
    n, K = Z.shape
    yy = y if offset is None else y - offset
    c = (Z * yy[:, None]).mean(axis=0)
    b = (Z * a[:, None]).mean(axis=0)

    def solve(W):
        hess = 2 * b @ W @ b
        scale = 2 * np.sum(b**2) * max(np.linalg.norm(W, 2), np.finfo(float).tiny)
        if not np.isfinite(hess) or hess <= IDENT_TOL * max(scale, np.finfo(float).tiny):
            raise IdentificationError(f"GMM objective has a singular second derivative ({hess:.3g}); "
                                      "beta not identified")
        return float(b @ W @ c / (b @ W @ b)), float(hess)

    def optimal_weight(beta):
        U = Z * (yy - beta * a)[:, None]
        if config.center:
            U = U - U.mean(axis=0)
        W, rank = ginv(U.T @ U / n)
        return W, rank

    W = np.eye(K)
    beta, hess = solve(W)
    iterations, rank = 1, K
    if config.weight != "identity":
        steps = 1 if config.weight == "two-step" else config.max_iter
        for _ in range(steps):
            W, rank = optimal_weight(beta)
            new, hess = solve(W)
            iterations += 1
            done = abs(new - beta) <= config.tol * max(1.0, abs(beta))
            beta = new
            if done:
                break
    gbar = c - beta * b
    obj = float(gbar @ W @ gbar)
    diag = {"iterations": iterations, "objective": obj, "hessian": hess, "weight_rank": rank,
            "converged": True, "K": K}
    if config.weight != "identity":
        diag["j_statistic"] = n * obj
    return beta, W, diag


def genius_gmm(table: ObservationTable, config: GmmConfig | None = None, level: float = 0.95) -> CausalEstimate:
    """Multi-instrument estimator: identity-weight GMM, then the optimal (centered) weight."""
    config = config or GmmConfig()
    diag = relevance_diagnostic(table)
    pieces = _gmm_pieces(table, config)
    beta, W, gdiag = gmm_solve(pieces.Z, table.y, table.a, config)
    if gdiag["weight_rank"] < pieces.Z.shape[1]:
        warnings.warn(f"moment covariance is rank {gdiag['weight_rank']} < K = {pieces.Z.shape[1]}; "
                      "using its pseudo-inverse", RuntimeWarning, stacklevel=2)
    system = AdditiveSystem(H=pieces.H, a=table.a, y=table.y, inst_models=pieces.inst_models,
                            inst_x=pieces.inst_x, a_model=pieces.a_model, a_x=pieces.a_x, beta=beta,
                            weight=W, center=config.center)
    return _finalize(beta, system.sandwich(), "genius-gmm", table, level, {
        "phi_hat": diag.phi_hat, "phi_per_iv": [float(v) for v in diag.per_iv],
        "weight": config.weight, **gdiag,
    })


def genius_efficient(table: ObservationTable, scale: str = "additive", config: GmmConfig | None = None,
                     outcome_model: str = "linear", level: float = 0.95) -> CausalEstimate:
    """Efficiency-augmented estimator.

    A first-pass estimate defines the treatment-free outcome Y0 = Y - beta A
    (or Y exp(-beta A)); an outcome model mu(G) fitted to Y0 is subtracted
    (or divided out) in the final estimating equation. Falls back to the
    first-pass estimate, with a warning, when the outcome model cannot be fitted.
    """
    if scale == "multiplicative":
        from .link import genius_efficient_multiplicative
        return genius_efficient_multiplicative(table, level=level)
    if scale != "additive":
        raise ValueError(f"unknown scale {scale!r}")
    config = config or GmmConfig()
    single = table.p == 1 and table.c is None and config.h is None
    first = genius_single(table, level=level) if single else genius_gmm(table, config, level)
    y0 = table.y - first.beta_hat * table.a
    try:
        if outcome_model == "saturated":
            mu = fit_saturated(y0, table.g)
        else:
            mu = fit_linear(y0, table.g)
    except MRGeniusError as exc:
        warnings.warn(f"outcome model fit failed ({exc}); returning the first-pass estimate",
                      RuntimeWarning, stacklevel=2)
        return first
    mu_design = mu.design(table.g)
    if single:
        model, x = fit_exposure_model(table, "auto", covariates=False)
        inst_models, cx = _instrument_models(table.g, None)
        H = table.g
        Z = (H[:, 0] - H[:, 0].mean()) * (table.a - model.predict(x))
        den = np.mean(Z * table.a)
        _check_denominator(den, Z, table.a)
        beta = float(np.mean(Z * (table.y - mu.predict(table.g))) / den)
        W = W0 = np.eye(1)
        gdiag = {"iterations": 0, "objective": 0.0, "converged": True}
    else:
        pieces = _gmm_pieces(table, config)
        model, x, inst_models, cx, H = pieces.a_model, pieces.a_x, pieces.inst_models, pieces.inst_x, pieces.H
        _, W0, _ = gmm_solve(pieces.Z, table.y, table.a, config)
        beta, W, gdiag = gmm_solve(pieces.Z, table.y, table.a, config, offset=mu.predict(table.g))
    system = AdditiveSystem(
        H=H, a=table.a, y=table.y, inst_models=inst_models, inst_x=cx, a_model=model, a_x=x, beta=beta,
        weight=W, center=config.center,
        efficient=EfficientPart(mu_design=mu_design, eta=mu.coefficients, beta0=first.beta_hat, weight0=W0),
    )
    return _finalize(beta, system.sandwich(), "genius-efficient", table, level, {
        "phi_hat": first.diagnostics.get("phi_hat"), "first_pass_beta": first.beta_hat,
        "outcome_model": mu.kind, **gdiag,
    })
