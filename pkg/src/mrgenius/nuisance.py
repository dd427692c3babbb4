"""Conditional-mean models plugged into the estimating equations.

Every model exposes its design matrix, predictions and the per-row derivative
of the prediction with respect to its coefficients; the sandwich variance
code needs all three.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, logit

from .errors import ConvergenceError, DataValidationError, IdentificationError

KINDS = ("saturated", "linear", "logistic", "exponential-mean")


def _as_matrix(x, n=None):
    if x is None:
        if n is None:
            raise ValueError("need n when x is None")
        return np.empty((n, 0))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _level_key(row) -> tuple:
    return tuple(float(v) for v in row)


@dataclass(frozen=True, eq=False)
class NuisanceModel:
    """A fitted conditional-mean model.

    ``levels`` is only used by saturated models: the observed level tuples in
    coefficient order, so the coefficient vector is the vector of group means.
    """

    kind: str
    coefficients: np.ndarray
    intercept: bool = True
    levels: tuple[tuple[float, ...], ...] = ()
    names: tuple[str, ...] = ()
    iterations: int = 0
    score_norm: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        coef = np.array(self.coefficients, dtype=float)
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    def design(self, x) -> np.ndarray:
        if self.kind == "saturated":
            x = _as_matrix(x)
            index = {lv: k for k, lv in enumerate(self.levels)}
            out = np.zeros((x.shape[0], len(self.levels)))
            for i, row in enumerate(x):
                key = _level_key(row)
                if key not in index:
                    raise DataValidationError(f"level {key} was not seen when fitting the saturated model")
                out[i, index[key]] = 1.0
            return out
        n = None if x is None else np.shape(x)[0]
        x = _as_matrix(x, n)
        if self.intercept:
            return np.column_stack([np.ones(x.shape[0]), x])
        return x

    def _mean(self, eta):
        if self.kind == "logistic":
            return expit(eta)
        if self.kind == "exponential-mean":
            return np.exp(eta)
        return eta

    def _dmean(self, eta):
        if self.kind == "logistic":
            p = expit(eta)
            return p * (1 - p)
        if self.kind == "exponential-mean":
            return np.exp(eta)
        return np.ones_like(eta)

    def predict(self, x, coefficients=None) -> np.ndarray:
        coef = self.coefficients if coefficients is None else np.asarray(coefficients, float)
        return self._mean(self.design(x) @ coef)

    def gradient(self, x, coefficients=None) -> np.ndarray:
        """Row-wise d prediction / d coefficients, shape (n, k)."""
        coef = self.coefficients if coefficients is None else np.asarray(coefficients, float)
        X = self.design(x)
        return self._dmean(X @ coef)[:, None] * X

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "coefficients": [float(v) for v in self.coefficients],
               "intercept": self.intercept}
        if self.names:
            out["columns"] = list(self.names)
        if self.kind == "saturated":
            out["levels"] = [
                {"level": list(lv), "mean": float(m)} for lv, m in zip(self.levels, self.coefficients)
            ]
        return out


def fit_saturated(target, by, names=()) -> NuisanceModel:
    """Within-group means of ``target`` for each observed level of ``by``."""
    y = np.asarray(target, dtype=float)
    x = _as_matrix(by)
    keys = [_level_key(row) for row in x]
    levels = tuple(sorted(set(keys)))
    index = {lv: k for k, lv in enumerate(levels)}
    inv = np.array([index[k] for k in keys])
    sums = np.bincount(inv, weights=y, minlength=len(levels))
    counts = np.bincount(inv, minlength=len(levels))
    return NuisanceModel("saturated", sums / counts, intercept=False, levels=levels,
                         names=tuple(names))


def _collinear_columns(X: np.ndarray, names) -> list[str]:
    bad, basis = [], np.empty((X.shape[0], 0))
    for j in range(X.shape[1]):
        trial = np.column_stack([basis, X[:, j]])
        if np.linalg.matrix_rank(trial) > basis.shape[1]:
            basis = trial
        else:
            bad.append(names[j])
    return bad


def _design_names(x, intercept, names):
    k = x.shape[1]
    names = list(names) if names else [f"x{j + 1}" for j in range(k)]
    return (["(intercept)"] if intercept else []) + names


def fit_linear(target, design, intercept=True, names=()) -> NuisanceModel:
    """Ordinary least squares of ``target`` on ``design`` (plus intercept)."""
    y = np.asarray(target, dtype=float)
    x = _as_matrix(design, y.size)
    model = NuisanceModel("linear", np.zeros(x.shape[1] + intercept), intercept=intercept,
                          names=tuple(names))
    X = model.design(x)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        bad = _collinear_columns(X, _design_names(x, intercept, names))
        raise DataValidationError(f"design matrix is rank deficient; collinear column(s): {', '.join(bad)}")
    # normal equations via QR; lstsq keeps residuals orthogonal to ~1e-14
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return NuisanceModel("linear", coef, intercept=intercept, names=tuple(names))


def _irls(kind, y, X, tol, max_iter, start=None):
    """Newton/IRLS for canonical-link GLMs with step-halving on deviance increase."""
    if kind == "logistic":
        mean = expit
        var = lambda m: m * (1 - m)  # noqa: E731

        def deviance(eta):
            return -2 * np.sum(y * eta - np.logaddexp(0, eta))
    else:
        mean = np.exp
        var = lambda m: m  # noqa: E731

        def deviance(eta):
            return -2 * np.sum(y * eta - np.exp(eta))

    beta = np.zeros(X.shape[1]) if start is None else np.array(start, float)
    if start is None and X.shape[1]:
        ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6) if kind == "logistic" else max(y.mean(), 1e-12)
        beta[0] = logit(ybar) if kind == "logistic" else np.log(ybar)
    eta = X @ beta
    dev = deviance(eta)
    trace = []
    for it in range(1, max_iter + 1):
        m = mean(eta)
        score = X.T @ (y - m)
        gnorm = float(np.linalg.norm(score) / y.size)
        trace.append(gnorm)
        if gnorm < tol:
            beta, gnorm = _polish(beta, X, y, mean, var, gnorm)
            return beta, it - 1, gnorm, trace
        info = X.T @ (var(m)[:, None] * X)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(50):
            cand = beta + t * step
            new_dev = deviance(X @ cand)
            if np.isfinite(new_dev) and new_dev <= dev + 1e-12 * abs(dev):
                break
            t *= 0.5
        beta = cand
        eta = X @ beta
        dev = new_dev
        if np.max(np.abs(eta)) > 30:
            raise ConvergenceError(
                f"{kind} fit diverging (|linear predictor| > 30; separation?), "
                f"gradient norm {gnorm:.3g}", trace)
    m = mean(eta)
    gnorm = float(np.linalg.norm(X.T @ (y - m)) / y.size)
    trace.append(gnorm)
    if gnorm < tol:
        return beta, max_iter, gnorm, trace
    raise ConvergenceError(
        f"{kind} fit did not converge in {max_iter} iterations; final gradient norm {gnorm:.3g}", trace)


def _polish(beta, X, y, mean, var, gnorm, steps=3):
    """Extra full Newton steps once converged, kept only while the score shrinks.

    Quadratic convergence takes the fit to rounding level, so saturated designs
    reproduce group means to machine precision.
    """
    for _ in range(steps):
        m = mean(X @ beta)
        info = X.T @ (var(m)[:, None] * X)
        try:
            cand = beta + np.linalg.solve(info, X.T @ (y - m))
        except np.linalg.LinAlgError:
            break
        g = float(np.linalg.norm(X.T @ (y - mean(X @ cand))) / y.size)
        if not g < gnorm:
            break
        beta, gnorm = cand, g
    return beta, gnorm


def fit_logistic(target, design, intercept=True, names=(), tol=1e-8, max_iter=100) -> NuisanceModel:
    """Logistic regression by IRLS; ``tol`` bounds the averaged score norm."""
    y = np.asarray(target, dtype=float)
    if np.any((y != 0) & (y != 1)):
        raise DataValidationError("logistic regression needs a binary target")
    x = _as_matrix(design, y.size)
    shell = NuisanceModel("logistic", np.zeros(x.shape[1] + intercept), intercept=intercept)
    X = shell.design(x)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        bad = _collinear_columns(X, _design_names(x, intercept, names))
        raise DataValidationError(f"design matrix is rank deficient; collinear column(s): {', '.join(bad)}")
    coef, it, gnorm, _ = _irls("logistic", y, X, tol, max_iter)
    return NuisanceModel("logistic", coef, intercept=intercept, names=tuple(names),
                         iterations=it, score_norm=gnorm)


def fit_exponential_mean(target, design, intercept=True, names=(), tol=1e-10, max_iter=100) -> NuisanceModel:
    """Log-link mean model fitted by the Poisson quasi-score (target >= 0)."""
    y = np.asarray(target, dtype=float)
    if np.any(y < 0):
        raise DataValidationError("log-link mean model needs a non-negative target")
    if not np.any(y > 0):
        raise DataValidationError("log-link mean model needs a target that is not identically zero")
    x = _as_matrix(design, y.size)
    shell = NuisanceModel("exponential-mean", np.zeros(x.shape[1] + intercept), intercept=intercept)
    X = shell.design(x)
    # the score is scale-equivariant in y, so fit on a unit-mean target
    scale = y.mean()
    coef, it, gnorm, _ = _irls("poisson", y / scale, X, tol, max_iter)
    if intercept:
        coef[0] += np.log(scale)
    return NuisanceModel("exponential-mean", coef, intercept=intercept, names=tuple(names),
                         iterations=it, score_norm=gnorm * scale)


def fit_default(target, design, binary: bool, intercept=True, names=()) -> NuisanceModel:
    """Logistic for a binary target, linear otherwise."""
    if binary:
        return fit_logistic(target, design, intercept=intercept, names=names)
    return fit_linear(target, design, intercept=intercept, names=names)


def log_mean_ratio_moment(a, g, varpi) -> np.ndarray:
    """P_n[A exp(-varpi'G)(G - P_n G)]."""
    g = _as_matrix(g)
    w = np.asarray(a, float) * np.exp(-g @ np.atleast_1d(varpi))
    return (w[:, None] * (g - g.mean(axis=0))).mean(axis=0)


def fit_log_mean_ratio(a, g, tol=1e-8, max_iter=200) -> NuisanceModel:
    """Solve P_n[A exp(-varpi'G)(G - P_n G)] = 0 for the log mean ratio varpi.

    The moment is, up to a positive factor, the gradient of the convex map
    varpi -> P_n[A exp(-varpi'(G - P_n G))], so damped Newton on that map is
    used, with a bracketing root search as fallback for a single IV. The
    returned model predicts E(A|G) = exp(c + varpi'G) with
    exp(c) = P_n[A exp(-varpi'G)].
    """
    a = np.asarray(a, dtype=float)
    g = _as_matrix(g)
    if np.any(a < 0):
        raise DataValidationError("log mean ratio needs a non-negative exposure")
    if not np.any(a > 0):
        raise DataValidationError("log mean ratio needs an exposure that is not identically zero")
    gc = g - g.mean(axis=0)
    k = g.shape[1]
    varpi = np.zeros(k)
    trace = []

    def moment(v):
        return log_mean_ratio_moment(a, g, v)

    converged = False
    for it in range(max_iter):
        e = a * np.exp(-gc @ varpi)
        grad = -(e[:, None] * gc).mean(axis=0)
        res = float(np.linalg.norm(moment(varpi)))
        trace.append(res)
        if res < tol:
            converged = True
            break
        hess = (e[:, None, None] * gc[:, :, None] * gc[:, None, :]).mean(axis=0)
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        f0 = e.mean()
        t = 1.0
        while t > 1e-12:
            cand = varpi + t * step
            if np.mean(a * np.exp(-gc @ cand)) <= f0 + 1e-4 * t * grad @ step:
                break
            t *= 0.5
        if not np.all(np.isfinite(cand)):
            break
        if np.max(np.abs(cand - varpi)) < 1e-15 * max(1.0, np.max(np.abs(varpi))):
            varpi = cand
            converged = float(np.linalg.norm(moment(varpi))) < tol
            break
        varpi = cand
        if np.max(np.abs(varpi)) > 50:
            break

    if not converged and k == 1:
        f = lambda v: moment(np.array([v]))[0]  # noqa: E731
        lo, hi = -1.0, 1.0
        while np.sign(f(lo)) == np.sign(f(hi)) and hi < 64:
            lo, hi = 2 * lo, 2 * hi
        if np.sign(f(lo)) != np.sign(f(hi)):
            varpi = np.array([optimize.brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)])
            res = abs(f(varpi[0]))
            trace.append(res)
            converged = res < tol
    final = float(np.linalg.norm(moment(varpi)))
    if not converged or not np.all(np.isfinite(varpi)):
        raise ConvergenceError(f"log mean ratio equation did not converge; residual norm {final:.3g}", trace)
    c = np.log(np.mean(a * np.exp(-g @ varpi)))
    return NuisanceModel("exponential-mean", np.concatenate([[c], varpi]), intercept=True,
                         iterations=len(trace), score_norm=final)


def fit_logit_contrast(a, g, names=()) -> NuisanceModel:
    """Model of Pr(A=1|G) whose log-odds contrasts against G = 0 give phi_g.

    Saturated (per-level empirical logits) for discrete G, main-effects
    logistic otherwise. Use :func:`logit_contrast` to evaluate phi_g.
    """
    from .data import is_discrete

    a = np.asarray(a, dtype=float)
    g = _as_matrix(g)
    if np.any((a != 0) & (a != 1)):
        raise DataValidationError("logit contrast needs a binary exposure")
    if is_discrete(g):
        ref = np.all(g == 0, axis=1)
        if not ref.any():
            raise IdentificationError("no units at the reference level G = 0")
        model = fit_saturated(a, g, names=names)
        p = model.coefficients
        if np.any((p <= 0) | (p >= 1)):
            bad = [lv for lv, q in zip(model.levels, p) if q <= 0 or q >= 1]
            raise IdentificationError(f"exposure is constant within G level(s) {bad}; logits undefined")
        return model
    return fit_logistic(a, g, names=names)


def logit_contrast(model: NuisanceModel, g) -> np.ndarray:
    """phi_g(G) = logit Pr(A=1|G) - logit Pr(A=1|G=0)."""
    g = _as_matrix(g)
    ref = np.zeros((1, g.shape[1]))
    return logit(model.predict(g)) - logit(model.predict(ref))[0]
