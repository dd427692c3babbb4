"""Stacked estimating-equation (sandwich) variances and Wald intervals.

The additive estimators share one stacked system. With instrument columns
H (n x K), exposure model E(A|G,C; psi) and instrument-centering models
E(H_j|C; omega_j) (intercept-only without covariates, so omega_j is the mean
of H_j), the per-row raw moments are

    X_j'(H_j - E_j)                           one block per instrument column
    X_A'(A - E_A)                             exposure model score
    Z (Y - beta0 A)                           first-pass moments (efficient variant)
    X_mu'(Y - beta0 A - X_mu eta)             outcome-model score (efficient variant)
    Z (Y - beta A - X_mu eta)                 final moments

with Z_j = w(C) (H_j - E_j)(A - E_A). Nuisance blocks enter the parameter
equations unchanged; each K-vector of moments is collapsed to one equation
by the fixed row Lambda'W, Lambda = P_n[dU/dbeta]. The covariance is
pinv(B) M Omega M' pinv(B)' / n with B = M P_n[dm/dtheta] and
Omega = P_n[m m'] (moment blocks centered). For one instrument and no extras
this is exactly the three-block single-IV system; for K instruments the
layout is k + (k+1) + 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .nuisance import NuisanceModel

# relative singular-value cutoff for generalized inverses
PINV_RCOND = 1e-12


def ginv(matrix: np.ndarray) -> tuple[np.ndarray, int]:
    """Moore-Penrose inverse with a relative cutoff; also returns the numerical rank."""
    matrix = np.atleast_2d(matrix)
    s = np.linalg.svd(matrix, compute_uv=False)
    rank = int(np.sum(s > PINV_RCOND * (s[0] if s.size else 0.0)))
    return np.linalg.pinv(matrix, rcond=PINV_RCOND), rank


@dataclass(frozen=True, eq=False)
class SandwichParts:
    bread: np.ndarray
    meat: np.ndarray
    covariance: np.ndarray
    layout: dict
    n: int
    bread_rank: int = 0
    raw_jacobian: np.ndarray | None = None
    combination: np.ndarray | None = None
    system: object = field(default=None, repr=False)

    @property
    def beta_variance(self) -> float:
        return float(max(self.covariance[-1, -1], 0.0))

    @property
    def se(self) -> float:
        return float(np.sqrt(self.beta_variance))


def _finish(bread, meat, n, layout, raw_jacobian=None, combination=None, system=None) -> SandwichParts:
    binv, rank = ginv(bread)
    if rank < bread.shape[0]:
        warnings.warn(f"bread matrix is singular (rank {rank} < {bread.shape[0]}); using pseudo-inverse",
                      RuntimeWarning, stacklevel=3)
    cov = binv @ meat @ binv.T / n
    cov = 0.5 * (cov + cov.T)
    return SandwichParts(bread=bread, meat=meat, covariance=cov, layout=layout, n=n,
                         bread_rank=rank, raw_jacobian=raw_jacobian, combination=combination, system=system)


@dataclass(eq=False)
class EfficientPart:
    """Extra blocks for the outcome-model-augmented estimator."""

    mu_design: np.ndarray        # X_mu, (n, r)
    eta: np.ndarray              # fitted outcome-model coefficients
    beta0: float                 # first-pass estimate the outcome model was fitted at
    weight0: np.ndarray          # K x K weight of the first pass


@dataclass(eq=False)
class AdditiveSystem:
    """Stacked moments of the additive-scale estimators; see the module docstring."""

    H: np.ndarray
    a: np.ndarray
    y: np.ndarray
    inst_models: list[NuisanceModel]
    inst_x: np.ndarray
    a_model: NuisanceModel
    a_x: np.ndarray
    beta: float
    weight: np.ndarray | None = None           # K x K; identity when None
    row_weight: np.ndarray | None = None       # h(C) multiplier, ones when None
    efficient: EfficientPart | None = None
    center: bool = True
    layout: dict = field(init=False)

    def __post_init__(self):
        self.H = np.asarray(self.H, float)
        if self.H.ndim == 1:
            self.H = self.H[:, None]
        n, K = self.H.shape
        if self.weight is None:
            self.weight = np.eye(K)
        if self.row_weight is None:
            self.row_weight = np.ones(n)
        layout, pos = {}, 0
        for j, m in enumerate(self.inst_models):
            k = m.coefficients.size
            layout[f"inst{j}"] = slice(pos, pos + k)
            pos += k
        q = self.a_model.coefficients.size
        layout["psi"] = slice(pos, pos + q)
        pos += q
        if self.efficient is not None:
            layout["beta0"] = slice(pos, pos + 1)
            pos += 1
            r = self.efficient.eta.size
            layout["eta"] = slice(pos, pos + r)
            pos += r
        layout["beta"] = slice(pos, pos + 1)
        self.layout = layout

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def K(self) -> int:
        return self.H.shape[1]

    def theta_hat(self) -> np.ndarray:
        parts = [m.coefficients for m in self.inst_models] + [self.a_model.coefficients]
        if self.efficient is not None:
            parts += [[self.efficient.beta0], self.efficient.eta]
        parts.append([self.beta])
        return np.concatenate([np.ravel(p) for p in parts]).astype(float)

    def _pieces(self, theta):
        L = self.layout
        E = np.column_stack([m.predict(self.inst_x, theta[L[f"inst{j}"]])
                             for j, m in enumerate(self.inst_models)])
        EA = self.a_model.predict(self.a_x, theta[L["psi"]])
        Hc = self.H - E
        ra = self.a - EA
        Z = self.row_weight[:, None] * Hc * ra[:, None]
        return E, EA, Hc, ra, Z

    def raw_moments(self, theta) -> np.ndarray:
        """Per-row stacked moments m~(theta), shape (n, D)."""
        L = self.layout
        E, EA, Hc, ra, Z = self._pieces(theta)
        cols = [m.design(self.inst_x) * Hc[:, [j]] for j, m in enumerate(self.inst_models)]
        cols.append(self.a_model.design(self.a_x) * ra[:, None])
        offset = 0.0
        if self.efficient is not None:
            b0 = theta[L["beta0"]][0]
            eta = theta[L["eta"]]
            Xmu = self.efficient.mu_design
            cols.append(Z * (self.y - b0 * self.a)[:, None])
            offset = Xmu @ eta
            cols.append(Xmu * (self.y - b0 * self.a - offset)[:, None])
        beta = theta[L["beta"]][0]
        cols.append(Z * (self.y - beta * self.a - offset)[:, None])
        return np.column_stack(cols)

    def raw_layout(self) -> dict:
        """Row slices of the raw moment vector."""
        out, pos = {}, 0
        for j, m in enumerate(self.inst_models):
            k = m.coefficients.size
            out[f"inst{j}"] = slice(pos, pos + k)
            pos += k
        q = self.a_model.coefficients.size
        out["psi"] = slice(pos, pos + q)
        pos += q
        if self.efficient is not None:
            out["U0"] = slice(pos, pos + self.K)
            pos += self.K
            r = self.efficient.eta.size
            out["eta"] = slice(pos, pos + r)
            pos += r
        out["U"] = slice(pos, pos + self.K)
        return out

    def raw_jacobian(self, theta) -> np.ndarray:
        """Analytic P_n[d m~ / d theta], shape (D, d)."""
        L, R = self.layout, self.raw_layout()
        n = self.n
        d = theta.size
        D = R["U"].stop
        J = np.zeros((D, d))
        E, EA, Hc, ra, Z = self._pieces(theta)
        w = self.row_weight
        grads = [m.gradient(self.inst_x, theta[L[f"inst{j}"]]) for j, m in enumerate(self.inst_models)]
        DA = self.a_model.gradient(self.a_x, theta[L["psi"]])
        for j, m in enumerate(self.inst_models):
            X = m.design(self.inst_x)
            J[R[f"inst{j}"], L[f"inst{j}"]] = -X.T @ grads[j] / n
        XA = self.a_model.design(self.a_x)
        J[R["psi"], L["psi"]] = -XA.T @ DA / n

        def fill_u(rows, resid, beta_slice, eta_slice=None, Xmu=None):
            for j in range(self.K):
                r = rows.start + j
                J[r, L[f"inst{j}"]] = -(grads[j] * (w * ra * resid)[:, None]).mean(axis=0)
                J[r, L["psi"]] = -(DA * (w * Hc[:, j] * resid)[:, None]).mean(axis=0)
                J[r, beta_slice] = -np.mean(Z[:, j] * self.a)
                if eta_slice is not None:
                    J[r, eta_slice] = -(Xmu * Z[:, [j]]).mean(axis=0)

        offset = 0.0
        if self.efficient is not None:
            b0 = theta[L["beta0"]][0]
            Xmu = self.efficient.mu_design
            offset = Xmu @ theta[L["eta"]]
            fill_u(R["U0"], self.y - b0 * self.a, L["beta0"])
            J[R["eta"], L["beta0"]] = -(Xmu.T @ self.a / n)[:, None]
            J[R["eta"], L["eta"]] = -Xmu.T @ Xmu / n
        beta = theta[L["beta"]][0]
        fill_u(R["U"], self.y - beta * self.a - offset, L["beta"],
               L.get("eta") if self.efficient is not None else None,
               self.efficient.mu_design if self.efficient is not None else None)
        return J

    def combination(self, theta) -> np.ndarray:
        """Row-combination matrix M (d x D): identity on nuisance blocks, Lambda'W on moment blocks."""
        L, R = self.layout, self.raw_layout()
        d, D = theta.size, R["U"].stop
        M = np.zeros((d, D))
        E, EA, Hc, ra, Z = self._pieces(theta)
        for j in range(self.K):
            M[L[f"inst{j}"], R[f"inst{j}"]] = np.eye(L[f"inst{j}"].stop - L[f"inst{j}"].start)
        M[L["psi"], R["psi"]] = np.eye(L["psi"].stop - L["psi"].start)
        lam = -(Z * self.a[:, None]).mean(axis=0)
        if self.efficient is not None:
            M[L["beta0"], R["U0"]] = lam @ self.efficient.weight0
            M[L["eta"], R["eta"]] = np.eye(L["eta"].stop - L["eta"].start)
        M[L["beta"], R["U"]] = lam @ self.weight
        return M

    def stacked_mean(self, theta, M=None) -> np.ndarray:
        """M P_n[m~(theta)]; the parameter equations solved at theta-hat (up to the GMM remainder)."""
        M = self.combination(self.theta_hat()) if M is None else M
        return M @ self.raw_moments(theta).mean(axis=0)

    def sandwich(self) -> SandwichParts:
        theta = self.theta_hat()
        m = self.raw_moments(theta)
        if self.center:
            R = self.raw_layout()
            m = m.copy()
            for key in ("U", "U0"):
                if key in R:
                    m[:, R[key]] -= m[:, R[key]].mean(axis=0)
        omega = m.T @ m / self.n
        J = self.raw_jacobian(theta)
        M = self.combination(theta)
        return _finish(M @ J, M @ omega @ M.T, self.n, dict(self.layout), raw_jacobian=J, combination=M,
                       system=self)


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], theta, step=1e-6) -> np.ndarray:
    """Central differences of a vector function; columns index theta."""
    theta = np.asarray(theta, float)
    f0 = np.asarray(f(theta))
    J = np.zeros((f0.size, theta.size))
    for k in range(theta.size):
        h = step * max(1.0, abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        J[:, k] = (np.asarray(f(tp)) - np.asarray(f(tm))) / (2 * h)
    return J


def check_bread(system: AdditiveSystem, step=1e-6) -> float:
    """Largest relative gap between the analytic and finite-difference bread."""
    theta = system.theta_hat()
    M = system.combination(theta)
    analytic = M @ system.raw_jacobian(theta)
    numeric = finite_difference_jacobian(lambda t: system.stacked_mean(t, M), theta, step)
    scale = np.maximum(np.abs(analytic), 1e-8 * max(1.0, np.abs(analytic).max()))
    return float(np.max(np.abs(analytic - numeric) / scale))


def _intercept_model(col) -> NuisanceModel:
    return NuisanceModel("linear", np.array([np.mean(col)]), intercept=True)


def sandwich_single(g, a, y, a_model: NuisanceModel, beta_hat: float) -> SandwichParts:
    """Three-block sandwich for the single-instrument ratio estimator.

    ``a_model`` is the fitted E(A|G); its conditioning variable is G itself.
    """
    g = np.asarray(g, float).reshape(-1, 1)
    if g.shape[1] != 1:
        raise ValueError("sandwich_single expects one instrument")
    system = AdditiveSystem(H=g, a=a, y=y, inst_models=[_intercept_model(g)],
                            inst_x=np.empty((g.shape[0], 0)), a_model=a_model, a_x=g, beta=beta_hat)
    return system.sandwich()


def sandwich_gmm(g, a, y, a_model: NuisanceModel, beta_hat: float, weight: np.ndarray,
                 center: bool = True) -> SandwichParts:
    """Sandwich for the multi-instrument GMM estimator with h(G) = G and no covariates."""
    g = np.asarray(g, float)
    if g.ndim == 1:
        g = g[:, None]
    system = AdditiveSystem(H=g, a=a, y=y, inst_models=[_intercept_model(col) for col in g.T],
                            inst_x=np.empty((g.shape[0], 0)), a_model=a_model, a_x=g, beta=beta_hat,
                            weight=weight, center=center)
    return system.sandwich()


def numeric_sandwich(row_moments: Callable[[np.ndarray], np.ndarray], theta, step=1e-6,
                     layout=None) -> SandwichParts:
    """Exactly-identified M-estimation sandwich with a finite-difference bread."""
    theta = np.asarray(theta, float)
    m = row_moments(theta)
    n = m.shape[0]
    bread = finite_difference_jacobian(lambda t: row_moments(t).mean(axis=0), theta, step)
    meat = m.T @ m / n
    return _finish(bread, meat, n, layout or {"beta": slice(theta.size - 1, theta.size)})


def wald_ci(beta_hat: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """beta_hat -/+ z_{(1+level)/2} se."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if not np.isfinite(se):
        return (float("nan"), float("nan"))
    z = stats.norm.ppf(0.5 + level / 2)
    return (float(beta_hat - z * se), float(beta_hat + z * se))
