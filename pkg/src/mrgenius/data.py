"""Observation tables, CSV ingestion and the heteroscedastic relevance check."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataValidationError, WeakIdentificationWarning

# columns with at most this many distinct values are treated as discrete
MAX_DISCRETE_LEVELS = 10


class ExposureKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"
    COUNT = "count"


def _frozen(x):
    if x is None:
        return None
    arr = np.array(x, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Immutable per-unit data: instruments, exposure, outcome and extras.

    ``y`` holds the observed follow-up time when ``delta`` (event indicator)
    is present.
    """

    g: np.ndarray
    a: np.ndarray
    y: np.ndarray
    delta: np.ndarray | None = None
    c: np.ndarray | None = None
    exposure_kind: ExposureKind = ExposureKind.CONTINUOUS
    iv_names: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if g.ndim == 1:
            g = g[:, None]
        object.__setattr__(self, "g", _frozen(g))
        object.__setattr__(self, "a", _frozen(np.ravel(self.a)))
        object.__setattr__(self, "y", _frozen(np.ravel(self.y)))
        object.__setattr__(self, "delta", _frozen(None if self.delta is None else np.ravel(self.delta)))
        c = self.c
        if c is not None:
            c = np.asarray(c, dtype=float)
            if c.ndim == 1:
                c = c[:, None]
        object.__setattr__(self, "c", _frozen(c))
        object.__setattr__(self, "exposure_kind", ExposureKind(self.exposure_kind))
        if not self.iv_names:
            names = tuple(f"g{j + 1}" for j in range(g.shape[1]))
            object.__setattr__(self, "iv_names", names)
        if self.c is not None and not self.covariate_names:
            names = tuple(f"c{j + 1}" for j in range(self.c.shape[1]))
            object.__setattr__(self, "covariate_names", names)
        self._validate()

    def _validate(self):
        n = self.g.shape[0]
        for name in ("a", "y", "delta"):
            v = getattr(self, name)
            if v is not None and v.shape[0] != n:
                raise DataValidationError(f"column {name!r} has length {v.shape[0]}, expected {n}")
        if self.c is not None and self.c.shape[0] != n:
            raise DataValidationError(f"covariates have {self.c.shape[0]} rows, expected {n}")
        if len(self.iv_names) != self.g.shape[1]:
            raise DataValidationError("iv_names does not match the number of instrument columns")
        errors = []
        for label, arr in (("g", self.g), ("a", self.a), ("y", self.y), ("delta", self.delta), ("c", self.c)):
            if arr is None:
                continue
            bad = ~np.isfinite(arr)
            if bad.ndim > 1:
                bad = bad.any(axis=1)
            errors += [(int(i) + 1, f"{label} is missing or not finite") for i in np.flatnonzero(bad)]
        if self.exposure_kind is ExposureKind.BINARY:
            errors += [(int(i) + 1, f"binary exposure has value {self.a[i]!r}")
                       for i in np.flatnonzero((self.a != 0) & (self.a != 1))]
        elif self.exposure_kind is ExposureKind.COUNT:
            errors += [(int(i) + 1, f"count exposure has value {self.a[i]!r}")
                       for i in np.flatnonzero((self.a < 0) | (self.a != np.round(self.a)))]
        if self.delta is not None:
            errors += [(int(i) + 1, f"event indicator has value {self.delta[i]!r}")
                       for i in np.flatnonzero((self.delta != 0) & (self.delta != 1))]
            errors += [(int(i) + 1, f"follow-up time {self.y[i]!r} is negative")
                       for i in np.flatnonzero(self.y < 0)]
        if errors:
            raise DataValidationError("invalid observation table", sorted(errors))

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def p(self) -> int:
        return self.g.shape[1]

    @property
    def survival(self) -> bool:
        return self.delta is not None

    def at_risk(self, t: float) -> np.ndarray:
        """R(t) = 1(Y* >= t)."""
        return (self.y >= t).astype(float)

    def counting(self, t: float) -> np.ndarray:
        """N(t) = 1(Y* <= t, event)."""
        if self.delta is None:
            raise DataValidationError("counting process needs an event indicator")
        return ((self.y <= t) & (self.delta == 1)).astype(float)

    def take(self, rows) -> ObservationTable:
        """Row subset (or resample, with repeated indices)."""
        rows = np.asarray(rows)
        return ObservationTable(
            g=self.g[rows], a=self.a[rows], y=self.y[rows],
            delta=None if self.delta is None else self.delta[rows],
            c=None if self.c is None else self.c[rows],
            exposure_kind=self.exposure_kind, iv_names=self.iv_names,
            covariate_names=self.covariate_names,
        )

    def with_ivs(self, columns: Sequence[int]) -> ObservationTable:
        cols = list(columns)
        return ObservationTable(
            g=self.g[:, cols], a=self.a, y=self.y, delta=self.delta, c=self.c,
            exposure_kind=self.exposure_kind,
            iv_names=tuple(self.iv_names[j] for j in cols),
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True)
class ColumnSchema:
    """Column roles for CSV ingestion."""

    iv_cols: tuple[str, ...]
    exposure_col: str
    outcome_col: str
    covariate_cols: tuple[str, ...] = ()
    event_col: str | None = None
    exposure_kind: ExposureKind = ExposureKind.CONTINUOUS

    def __post_init__(self):
        object.__setattr__(self, "iv_cols", tuple(self.iv_cols))
        object.__setattr__(self, "covariate_cols", tuple(self.covariate_cols))
        object.__setattr__(self, "exposure_kind", ExposureKind(self.exposure_kind))
        if not self.iv_cols:
            raise DataValidationError("at least one instrument column is required")

    @property
    def columns(self) -> list[str]:
        cols = [*self.iv_cols, self.exposure_col, self.outcome_col, *self.covariate_cols]
        if self.event_col:
            cols.append(self.event_col)
        return cols


def load_csv(path: str | Path, schema: ColumnSchema) -> ObservationTable:
    """Read a comma-separated UTF-8 file into a validated table.

    Rows with a missing or non-numeric declared field are rejected; all
    offending rows are reported together.
    """
    path = Path(path)
    if not path.is_file():
        raise DataValidationError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path} is empty") from None
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise DataValidationError(f"missing column(s) {', '.join(missing)} in {path.name}")
        idx = {c: header.index(c) for c in schema.columns}
        values: dict[str, list[float]] = {c: [] for c in schema.columns}
        errors = []
        for i, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            parsed = {}
            for col in schema.columns:
                j = idx[col]
                cell = row[j].strip() if j < len(row) else ""
                if cell == "":
                    errors.append((i, f"missing value in column {col!r}"))
                    continue
                try:
                    parsed[col] = float(cell)
                except ValueError:
                    errors.append((i, f"non-numeric value {cell!r} in column {col!r}"))
            if len(parsed) == len(schema.columns):
                for col, v in parsed.items():
                    values[col].append(v)
    if errors:
        raise DataValidationError(f"{len(errors)} invalid cell(s) in {path.name}", errors)
    col = lambda c: np.array(values[c], dtype=float)  # noqa: E731
    return ObservationTable(
        g=np.column_stack([col(c) for c in schema.iv_cols]),
        a=col(schema.exposure_col),
        y=col(schema.outcome_col),
        delta=col(schema.event_col) if schema.event_col else None,
        c=np.column_stack([col(c) for c in schema.covariate_cols]) if schema.covariate_cols else None,
        exposure_kind=schema.exposure_kind,
        iv_names=schema.iv_cols,
        covariate_names=schema.covariate_cols,
    )


def write_csv(table: ObservationTable, path: str | Path, schema: ColumnSchema) -> None:
    """Inverse of :func:`load_csv`; floats are written with ``repr`` so the round trip is exact."""
    arrays = {name: table.g[:, j] for j, name in enumerate(schema.iv_cols)}
    arrays[schema.exposure_col] = table.a
    arrays[schema.outcome_col] = table.y
    for j, name in enumerate(schema.covariate_cols):
        arrays[name] = table.c[:, j]
    if schema.event_col:
        arrays[schema.event_col] = table.delta
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(schema.columns)
        for i in range(table.n):
            w.writerow([repr(float(arrays[c][i])) for c in schema.columns])


def is_discrete(x: np.ndarray, max_levels: int = MAX_DISCRETE_LEVELS) -> bool:
    x = np.asarray(x)
    if x.ndim > 1:
        return all(is_discrete(col, max_levels) for col in x.T)
    return np.unique(x).size <= max_levels


@dataclass(frozen=True)
class RelevanceDiagnostic:
    """Empirical cov{G_j, var(A|G_j)} per instrument.

    ``phi_hat`` summarises the table: the single value when p = 1, otherwise
    the per-IV value with the largest |z|.
    """

    phi_hat: float
    per_iv: np.ndarray
    se: np.ndarray
    z: np.ndarray
    flagged: tuple[bool, ...]
    iv_names: tuple[str, ...]
    threshold: float
    method: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "phi_hat": float(self.phi_hat),
            "threshold_z": self.threshold,
            "ivs": [
                {"name": name, "phi_hat": float(v), "se": float(s), "z": float(z),
                 "flagged": bool(f), "variance_model": m}
                for name, v, s, z, f, m in zip(self.iv_names, self.per_iv, self.se, self.z,
                                               self.flagged, self.method)
            ],
        }


def _phi_single(gj: np.ndarray, a: np.ndarray) -> tuple[float, float, str]:
    n = gj.size
    gc = gj - gj.mean()
    if not np.any(gc):
        return 0.0, math.nan, "constant"
    if is_discrete(gj):
        levels, inv = np.unique(gj, return_inverse=True)
        means = np.bincount(inv, weights=a) / np.bincount(inv)
        resid = a - means[inv]
        method = "group"
    else:
        X = np.column_stack([np.ones(n), gj])
        coef, *_ = np.linalg.lstsq(X, a, rcond=None)
        resid = a - X @ coef
        method = "linear"
    # cov(G, fitted var(A|G)) equals P_n[(G - Gbar) resid^2] for both the
    # group-variance and the squared-residual regression estimators
    terms = gc * resid**2
    phi = float(terms.mean())
    se = float(terms.std() / math.sqrt(n))
    return phi, se, method


def relevance_diagnostic(table: ObservationTable, threshold: float = 2.0,
                         warn: bool = True) -> RelevanceDiagnostic:
    """Per-IV heteroscedasticity check; flags |phi|/se below ``threshold``.

    Discrete instruments use within-group variances of A; continuous ones
    regress squared residuals of a linear fit of A on G_j. Flagged IVs raise a
    :class:`WeakIdentificationWarning` when ``warn`` is set, never an error.
    """
    phis, ses, methods = [], [], []
    for j in range(table.p):
        phi, se, method = _phi_single(table.g[:, j], table.a)
        phis.append(phi)
        ses.append(se)
        methods.append(method)
    phis, ses = np.array(phis), np.array(ses)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(ses > 0, np.abs(phis) / ses, np.where(phis == 0, 0.0, np.inf))
    z = np.where(np.isnan(ses) & (phis == 0), 0.0, z)
    flagged = tuple(bool(zz < threshold) for zz in z)
    best = int(np.argmax(z)) if table.p > 1 else 0
    diag = RelevanceDiagnostic(
        phi_hat=float(phis[best]), per_iv=phis, se=ses, z=z, flagged=flagged,
        iv_names=table.iv_names, threshold=threshold, method=tuple(methods),
    )
    # one strong IV is enough for GMM identification, so warn only when none is
    if warn and all(flagged):
        names = ", ".join(table.iv_names)
        warnings.warn(f"weak heteroscedastic relevance (|phi|/se < {threshold}) for: {names}",
                      WeakIdentificationWarning, stacklevel=2)
    return diag
