"""One-dimensional root search: grid bracketing plus safeguarded Newton."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceError, IdentificationError


@dataclass(frozen=True)
class RootResult:
    root: float
    residual: float
    derivative: float
    iterations: int
    bracket: tuple[float, float]


def find_brackets(f: Callable[[float], float], lo: float = -10.0, hi: float = 10.0,
                  max_abs: float = 30.0, points: int = 401) -> list[tuple[float, float]]:
    """Sign-change intervals of ``f`` on a uniform grid over [lo, hi].

    The range is doubled (up to ``max_abs``) until at least one sign change
    turns up. Exact zeros on the grid come back as degenerate intervals.
    """
    while True:
        grid = np.linspace(lo, hi, points)
        vals = np.array([f(x) for x in grid])
        finite = np.isfinite(vals)
        out = []
        for i in range(points - 1):
            if not (finite[i] and finite[i + 1]):
                continue
            if vals[i] == 0:
                out.append((grid[i], grid[i]))
            elif vals[i] * vals[i + 1] < 0:
                out.append((grid[i], grid[i + 1]))
        if finite[-1] and vals[-1] == 0:
            out.append((grid[-1], grid[-1]))
        if out or (lo <= -max_abs and hi >= max_abs):
            return out
        lo, hi = max(2 * lo, -max_abs), min(2 * hi, max_abs)


def safeguarded_newton(f, fprime, lo, hi, xtol=1e-14, max_iter=200) -> tuple[float, int]:
    """Newton steps kept inside a shrinking sign-change bracket, bisecting when a step leaves it."""
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo, 0
    if fhi == 0:
        return hi, 0
    if flo * fhi > 0:
        raise ValueError("interval does not bracket a root")
    x = 0.5 * (lo + hi)
    for it in range(1, max_iter + 1):
        fx = f(x)
        if fx == 0:
            return x, it
        if np.sign(fx) == np.sign(flo):
            lo, flo = x, fx
        else:
            hi = x
        d = fprime(x) if fprime is not None else 0.0
        newton_ok = d != 0 and np.isfinite(d)
        if newton_ok:
            xn = x - fx / d
            newton_ok = lo < xn < hi
        x_new = xn if newton_ok else 0.5 * (lo + hi)
        if abs(x_new - x) <= xtol * max(1.0, abs(x)) or hi - lo <= xtol * max(1.0, abs(x)):
            return x_new, it
        x = x_new
    raise ConvergenceError(f"root search did not converge in {max_iter} iterations")


def solve_moment(f, fprime=None, lo=-10.0, hi=10.0, max_abs=30.0, prefer=0.0) -> RootResult:
    """Root of a scalar moment function; raises IdentificationError without a sign change.

    With several sign changes the root closest to ``prefer`` is returned.
    """
    brackets = find_brackets(f, lo, hi, max_abs)
    if not brackets:
        raise IdentificationError(
            f"estimating equation has no sign change on [{-max_abs:g}, {max_abs:g}]; effect not identified")
    roots = []
    for a, b in brackets:
        if a == b:
            roots.append((a, 0))
        else:
            roots.append(safeguarded_newton(f, fprime, a, b))
    best = min(range(len(roots)), key=lambda i: abs(roots[i][0] - prefer))
    root, it = roots[best]
    h = 1e-6 * max(1.0, abs(root))
    deriv = fprime(root) if fprime is not None else (f(root + h) - f(root - h)) / (2 * h)
    return RootResult(root=float(root), residual=float(f(root)), derivative=float(deriv),
                      iterations=it, bracket=tuple(map(float, brackets[best])))
