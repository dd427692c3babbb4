"""Comparison estimators: two-stage least squares, oracle TSLS and MR-Egger."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ObservationTable
from .errors import DataValidationError
from .inference import wald_ci


@dataclass(frozen=True)
class BaselineEstimate:
    beta_hat: float
    se: float
    method: str
    n: int
    p: int
    level: float = 0.95
    valid_ivs: tuple[int, ...] = ()
    extra: dict = field(default_factory=dict)

    @property
    def ci(self) -> tuple[float, float]:
        return wald_ci(self.beta_hat, self.se, self.level)

    def to_dict(self) -> dict:
        lo, hi = self.ci
        out = {"method": self.method, "beta": self.beta_hat, "se": self.se, "ci_lo": lo, "ci_hi": hi,
               "level": self.level, "phi_hat": None, "n": self.n, "p": self.p}
        if self.valid_ivs:
            out["valid_ivs"] = list(self.valid_ivs)
        if self.extra:
            out["diagnostics"] = dict(self.extra)
        return out


def tsls_core(y, endog, instruments, exog=None) -> dict:
    """Textbook 2SLS with an intercept.

    Regressors are [1, exog, endog]; instruments are [1, exog, instruments].
    Standard errors are the homoscedastic ones with n - k degrees of freedom.
    """
    y = np.asarray(y, float)
    n = y.size
    exog = np.empty((n, 0)) if exog is None else np.asarray(exog, float).reshape(n, -1)
    endog = np.asarray(endog, float).reshape(n, -1)
    instruments = np.asarray(instruments, float).reshape(n, -1)
    X = np.column_stack([np.ones(n), exog, endog])
    Zm = np.column_stack([np.ones(n), exog, instruments])
    if np.linalg.matrix_rank(Zm) < Zm.shape[1]:
        raise DataValidationError("instrument matrix is rank deficient")
    if Zm.shape[1] < X.shape[1]:
        raise DataValidationError("fewer instruments than endogenous regressors")
    # first stage fitted values, then OLS of y on them
    Xhat = Zm @ np.linalg.lstsq(Zm, X, rcond=None)[0]
    if np.linalg.matrix_rank(Xhat) < X.shape[1]:
        raise DataValidationError("first-stage design is rank deficient (instruments unrelated to exposure?)")
    coef = np.linalg.solve(Xhat.T @ Xhat, Xhat.T @ y)
    resid = y - X @ coef
    k = X.shape[1]
    sigma2 = resid @ resid / max(n - k, 1)
    cov = sigma2 * np.linalg.inv(Xhat.T @ Xhat)
    return {"coef": coef, "se": np.sqrt(np.diag(cov)), "cov": cov, "resid": resid}


def tsls(table: ObservationTable, iv_columns: Sequence[int] | None = None, level: float = 0.95) -> BaselineEstimate:
    """Y on A instrumented by the chosen G columns (all by default)."""
    cols = list(range(table.p)) if iv_columns is None else list(iv_columns)
    fit = tsls_core(table.y, table.a, table.g[:, cols], exog=table.c)
    return BaselineEstimate(float(fit["coef"][-1]), float(fit["se"][-1]), "tsls", table.n, table.p, level)


def oracle_tsls(table: ObservationTable, valid: Sequence[int], level: float = 0.95) -> BaselineEstimate:
    """TSLS using only the known-valid instruments; the rest enter both stages as exogenous regressors."""
    valid = sorted(set(int(j) for j in valid))
    if not valid:
        raise DataValidationError("oracle TSLS needs a non-empty valid-IV set")
    if min(valid) < 0 or max(valid) >= table.p:
        raise DataValidationError(f"valid-IV indices must lie in 0..{table.p - 1}")
    invalid = [j for j in range(table.p) if j not in valid]
    exog = table.g[:, invalid] if invalid else None
    if table.c is not None:
        exog = table.c if exog is None else np.column_stack([exog, table.c])
    fit = tsls_core(table.y, table.a, table.g[:, valid], exog=exog)
    return BaselineEstimate(float(fit["coef"][-1]), float(fit["se"][-1]), "oracle-tsls", table.n, table.p,
                            level, valid_ivs=tuple(valid))


def _simple_regression(x, y):
    n = x.size
    xc = x - x.mean()
    sxx = xc @ xc
    if sxx == 0:
        raise DataValidationError("instrument column is constant")
    slope = xc @ (y - y.mean()) / sxx
    resid = y - y.mean() - slope * xc
    se = np.sqrt(resid @ resid / (n - 2) / sxx)
    return slope, se


def mr_egger(table: ObservationTable, level: float = 0.95) -> BaselineEstimate:
    """Egger regression on per-instrument summary associations.

    gamma_j (G_j -> A) and Gamma_j (G_j -> Y) come from univariate OLS fits.
    After orienting each instrument so gamma_j > 0, Gamma is regressed on
    gamma with an intercept and weights 1/se(Gamma_j)^2; the slope is the
    effect estimate. The residual scale is floored at 1, as is conventional.
    """
    if table.p < 2:
        raise DataValidationError("MR-Egger needs at least two instruments")
    gx, gy, sy = [], [], []
    for j in range(table.p):
        bx, _ = _simple_regression(table.g[:, j], table.a)
        by, se_y = _simple_regression(table.g[:, j], table.y)
        sign = -1.0 if bx < 0 else 1.0
        gx.append(sign * bx)
        gy.append(sign * by)
        sy.append(se_y)
    gx, gy, sy = map(np.asarray, (gx, gy, sy))
    w = 1.0 / sy**2
    X = np.column_stack([np.ones(table.p), gx])
    XtW = X.T * w
    coef = np.linalg.solve(XtW @ X, XtW @ gy)
    resid = gy - X @ coef
    dof = table.p - 2
    sigma = np.sqrt(resid @ (w * resid) / dof) if dof > 0 else 1.0
    cov = np.linalg.inv(XtW @ X) * max(sigma, 1.0) ** 2
    return BaselineEstimate(float(coef[1]), float(np.sqrt(cov[1, 1])), "mr-egger", table.n, table.p, level,
                            extra={"intercept": float(coef[0]), "intercept_se": float(np.sqrt(cov[0, 0])),
                                   "residual_scale": float(sigma)})
