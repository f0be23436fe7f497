"""Linear regression with high-dimensional categorical fixed effects.

Fixed effects are absorbed by alternating projections: each sweep subtracts
group means factor by factor (in declaration order) from the outcome and every
regressor, until a full sweep changes no entry by more than ``tol``.  The
coefficients then come from a pivoted QR least-squares solve on the demeaned
data, which by Frisch-Waugh-Lovell equals OLS with every dummy included.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, stats

from .errors import (
    EmptyAfterDeletion,
    MissingColumn,
    NoConvergence,
    RankDeficient,
    UnknownColumn,
)
from .inference import ClusterAssignment, cluster_vcov, p_values
from .panel import (
    PanelDataset,
    carry_forward_after,
    lag,
    log_diff,
    log_weekly,
    moving_average,
    rolling_sum,
)

__all__ = [
    "Term",
    "RegressionSpec",
    "DesignMatrix",
    "FitResult",
    "LeastSquares",
    "apply_term",
    "build_design",
    "demean",
    "ols",
    "fit_fe",
    "fit_design",
    "ESTIMATORS",
]

ESTIMATORS = ("fe", "bc", "cbc")
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
RANK_TOL = 1e-10


# -- specification ---------------------------------------------------------

@dataclass(frozen=True)
class Term:
    """One regression variable built from a dataset column.

    ``transforms`` are applied in order, then the result is lagged by ``lag``
    days.  With ``interact`` set, the term is multiplied elementwise by that
    column lagged by the same number of days.

    Transform tokens: ``ma:<w>`` trailing mean, ``sum:<w>`` trailing sum,
    ``log`` log with zero counts mapped to -1, ``log:<z>`` zero counts mapped
    to ``z``, ``diff:<k>`` difference over ``k`` days, ``cumsum``,
    ``per:<column>`` divide by another column, ``cf:<YYYY-MM-DD>`` carry the
    last value forward after a date.
    """

    column: str
    lag: int = 0
    transforms: tuple[str, ...] = ()
    interact: str | None = None
    name: str | None = None

    def __post_init__(self):
        if self.lag < 0:
            raise ValueError("term lag must be nonnegative")
        object.__setattr__(self, "transforms", tuple(self.transforms))

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        label = self.column
        if self.transforms:
            label += "[" + ",".join(self.transforms) + "]"
        if self.lag:
            label += f"_L{self.lag}"
        if self.interact:
            label += f"_x_{self.interact}"
        return label

    def columns(self) -> set[str]:
        cols = {self.column}
        if self.interact:
            cols.add(self.interact)
        cols.update(t.split(":", 1)[1] for t in self.transforms if t.startswith("per:"))
        return cols

    def to_dict(self) -> dict:
        return {"column": self.column, "lag": self.lag, "transforms": list(self.transforms),
                "interact": self.interact, "name": self.name}

    @classmethod
    def from_dict(cls, d) -> "Term":
        if isinstance(d, str):
            return cls(d)
        return cls(d["column"], int(d.get("lag", 0)), tuple(d.get("transforms", ())),
                   d.get("interact"), d.get("name"))


@dataclass(frozen=True)
class RegressionSpec:
    """Declarative description of one estimation.

    ``fe_factors`` entries are ``"unit"``, ``"date"``, ``"week"``, a unit
    attribute name, or ``*``-joined composites such as ``"state*week"``.
    ``estimator`` is one of ``fe``, ``bc``, ``cbc``; ``jackknife`` is the
    number of random unit splits used by the debiased estimators.
    """

    outcome: Term
    regressors: tuple[Term, ...]
    fe_factors: tuple[str, ...] = ("unit",)
    cluster_var: str = "unit"
    estimator: str = "fe"
    jackknife: int = 2
    rng_seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "regressors", tuple(self.regressors))
        object.__setattr__(self, "fe_factors", tuple(self.fe_factors))
        if not self.regressors:
            raise ValueError("a regression needs at least one regressor")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.estimator != "fe" and self.jackknife < 1:
            raise ValueError("debiased estimators need jackknife >= 1")

    @property
    def term_names(self) -> tuple[str, ...]:
        return tuple(t.label for t in self.regressors)

    def with_estimator(self, estimator: str, **kw) -> "RegressionSpec":
        return replace(self, estimator=estimator, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["outcome"] = self.outcome.to_dict()
        d["regressors"] = [t.to_dict() for t in self.regressors]
        d["fe_factors"] = list(self.fe_factors)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d) -> "RegressionSpec":
        return cls(
            outcome=Term.from_dict(d["outcome"]),
            regressors=tuple(Term.from_dict(t) for t in d["regressors"]),
            fe_factors=tuple(d.get("fe_factors", ("unit",))),
            cluster_var=d.get("cluster_var", "unit"),
            estimator=d.get("estimator", "fe"),
            jackknife=int(d.get("jackknife", 2)),
            rng_seed=int(d.get("rng_seed", 0)),
            name=d.get("name", ""),
        )


# -- design ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Estimation sample after listwise deletion.

    ``rows`` index the dataset's flat rows; ``unit_codes`` and ``time_codes``
    are dataset unit positions and calendar positions of those rows.
    """

    rows: np.ndarray
    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    factor_codes: tuple[np.ndarray, ...]
    factor_names: tuple[str, ...]
    cluster_codes: np.ndarray
    unit_codes: np.ndarray
    time_codes: np.ndarray
    tss_total: float = float("nan")
    demeaned: bool = False
    n_iter: int = 0

    @property
    def nobs(self) -> int:
        return int(self.y.size)

    @property
    def n_levels(self) -> tuple[int, ...]:
        return tuple(int(c.max()) + 1 if c.size else 0 for c in self.factor_codes)

    @property
    def clusters(self) -> ClusterAssignment:
        return ClusterAssignment(self.cluster_codes, int(self.cluster_codes.max()) + 1)

    def subset(self, mask) -> "DesignMatrix":
        """Rows selected by ``mask`` with factor and cluster codes re-densified."""
        mask = np.asarray(mask)
        codes = tuple(_dense(c[mask]) for c in self.factor_codes)
        y = self.y[mask]
        return replace(
            self, rows=self.rows[mask], y=y, X=self.X[mask], factor_codes=codes,
            cluster_codes=_dense(self.cluster_codes[mask]), unit_codes=self.unit_codes[mask],
            time_codes=self.time_codes[mask],
            tss_total=float(np.sum((y - y.mean()) ** 2)) if not self.demeaned else float("nan"))


def _dense(values) -> np.ndarray:
    _, codes = np.unique(np.asarray(values), return_inverse=True)
    return codes.reshape(-1).astype(np.int64)


def _apply_transform(dataset: PanelDataset, x: np.ndarray, token: str) -> np.ndarray:
    op, _, arg = token.partition(":")
    if op == "ma":
        return moving_average(x, int(arg))
    if op == "sum":
        return rolling_sum(x, int(arg))
    if op == "log":
        return log_weekly(x, float(arg) if arg else -1.0)
    if op == "diff":
        return log_diff(x, int(arg))
    if op == "cumsum":
        return np.cumsum(x, axis=-1)
    if op == "per":
        if arg not in dataset:
            raise UnknownColumn(arg)
        with np.errstate(divide="ignore", invalid="ignore"):
            return x / dataset.wide(arg)
    if op == "cf":
        return carry_forward_after(x, dataset.dates, arg)
    raise ValueError(f"unknown transform {token!r}")


def apply_term(dataset: PanelDataset, term: Term) -> np.ndarray:
    """Evaluate a term on the dataset as an ``(n_units, n_dates)`` array."""
    if term.column not in dataset:
        raise UnknownColumn(term.column)
    x = dataset.wide(term.column)
    for token in term.transforms:
        x = _apply_transform(dataset, x, token)
    x = lag(x, term.lag)
    if term.interact:
        if term.interact not in dataset:
            raise UnknownColumn(term.interact)
        x = x * lag(dataset.wide(term.interact), term.lag)
    return x


def factor_labels(dataset: PanelDataset, factor: str) -> np.ndarray:
    """Integer labels (not yet dense) of a possibly composite factor, per dataset row."""
    parts = factor.split("*")
    labels = np.zeros(dataset.n_rows, dtype=np.int64)
    for part in parts:
        part = part.strip()
        if part == "unit":
            codes, n = dataset.unit_index, dataset.n_units
        elif part in ("date", "day"):
            codes, n = dataset.time_index, dataset.n_dates
        elif part == "week":
            codes = dataset.week_index
            n = int(codes.max()) + 1
        else:
            try:
                values = dataset.attr(part)
            except MissingColumn:
                raise UnknownColumn(part) from None
            keys = np.asarray(["\0" if v is None else str(v) for v in values], dtype=object)
            levels, unit_codes = np.unique(keys, return_inverse=True)
            unit_codes = unit_codes.reshape(-1)
            missing = np.flatnonzero(levels == "\0")
            unit_codes = np.where(np.isin(unit_codes, missing), -1, unit_codes)
            codes = np.repeat(unit_codes, dataset.n_dates)
            n = len(levels)
        labels = np.where((labels < 0) | (codes < 0), -1, labels * n + codes)
    return labels


def cluster_labels(dataset: PanelDataset, cluster_var: str) -> np.ndarray:
    if cluster_var == "unit":
        return dataset.unit_index
    if cluster_var == "cluster":
        keys = dataset.clusters()
    else:
        try:
            keys = dataset.attr(cluster_var)
        except MissingColumn:
            raise UnknownColumn(cluster_var) from None
    keys = np.asarray(["\0" if v is None else str(v) for v in keys], dtype=object)
    levels, codes = np.unique(keys, return_inverse=True)
    codes = codes.reshape(-1)
    codes = np.where(levels[codes] == "\0", -1, codes)
    return np.repeat(codes, dataset.n_dates)


def build_design(dataset: PanelDataset, spec: RegressionSpec) -> DesignMatrix:
    """Evaluate every term, drop rows with any missing value, recode factors."""
    y = apply_term(dataset, spec.outcome).reshape(-1)
    X = np.column_stack([apply_term(dataset, t).reshape(-1) for t in spec.regressors])
    factors = [factor_labels(dataset, f) for f in spec.fe_factors]
    clusters = cluster_labels(dataset, spec.cluster_var)
    keep = ~np.isnan(y) & ~np.isnan(X).any(axis=1) & (clusters >= 0)
    keep &= np.isfinite(y) & np.isfinite(X).all(axis=1)
    for f in factors:
        keep &= f >= 0
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise EmptyAfterDeletion(f"no complete rows for specification {spec.name or spec.outcome.label!r}")
    yk = y[rows]
    return DesignMatrix(
        rows=rows,
        y=yk,
        X=X[rows],
        names=spec.term_names,
        factor_codes=tuple(_dense(f[rows]) for f in factors),
        factor_names=tuple(spec.fe_factors),
        cluster_codes=_dense(clusters[rows]),
        unit_codes=dataset.unit_index[rows],
        time_codes=dataset.time_index[rows],
        tss_total=float(np.sum((yk - yk.mean()) ** 2)),
    )


# -- estimation ----------------------------------------------------------------

def _project_out(M: np.ndarray, codes: np.ndarray, counts: np.ndarray) -> np.ndarray:
    k = M.shape[1]
    n_levels = counts.size
    flat = (codes[:, None] * k + np.arange(k)).ravel()
    sums = np.bincount(flat, weights=M.ravel(), minlength=n_levels * k).reshape(n_levels, k)
    return (sums / counts[:, None])[codes]


def demean_array(M, factor_codes: Sequence[np.ndarray], tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER):
    """Residualize the columns of ``M`` on all factor dummies.

    Returns the residual matrix and the number of sweeps used.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    M = np.array(M, dtype=float)
    squeeze = M.ndim == 1
    if squeeze:
        M = M[:, None]
    codes = [np.asarray(c) for c in factor_codes]
    if not codes:
        return (M[:, 0] if squeeze else M), 0
    counts = [np.bincount(c).astype(float) for c in codes]
    counts = [np.where(c > 0, c, 1.0) for c in counts]

    def sweep(A):
        A = A.copy()
        for c, cnt in zip(codes, counts):
            A -= _project_out(A, c, cnt)
        return A

    n_iter = 1
    GX = sweep(M)
    if len(codes) == 1:
        return (GX[:, 0] if squeeze else GX), n_iter
    X = M
    while True:
        delta = float(np.max(np.abs(GX - X))) if M.size else 0.0
        if delta < tol:
            M = GX
            break
        if n_iter >= max_iter:
            raise NoConvergence(delta, n_iter)
        # Irons-Tuck extrapolation from two consecutive sweeps, column by column
        GGX = sweep(GX)
        d1 = GGX - GX
        d2 = d1 - (GX - X)
        den = np.einsum("ij,ij->j", d2, d2)
        step = np.divide(np.einsum("ij,ij->j", d1, d2), den, out=np.zeros_like(den),
                         where=den > 0)
        X = GGX - step * d1
        GX = sweep(X)
        n_iter += 2
    return (M[:, 0] if squeeze else M), n_iter


def demean(design: DesignMatrix, tol: float = DEFAULT_TOL,
           max_iter: int = DEFAULT_MAX_ITER) -> DesignMatrix:
    """Replace ``y`` and ``X`` by residuals from projecting on the fixed effects."""
    M = np.column_stack([design.y, design.X])
    R, n_iter = demean_array(M, design.factor_codes, tol, max_iter)
    return replace(design, y=R[:, 0].copy(), X=R[:, 1:].copy(), demeaned=True, n_iter=n_iter)


class LeastSquares(NamedTuple):
    coef: np.ndarray
    resid: np.ndarray


def ols(design, names: Sequence[str] | None = None) -> LeastSquares:
    """Least squares via QR with column pivoting.

    Raises
    ------
    RankDeficient
        When a pivot falls below ``1e-10`` times the largest one; the
        exception names the first column found to be collinear.
    """
    if isinstance(design, DesignMatrix):
        X, y, names = design.X, design.y, design.names
    else:
        X, y = design
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if names is None:
        names = tuple(f"x{j}" for j in range(k))
    if n < k:
        raise RankDeficient(names[n] if n < len(names) else names[-1])
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        raise RankDeficient(names[piv[0]] if k else "<empty>")
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < k:
        raise RankDeficient(names[piv[rank]])
    z = linalg.solve_triangular(R, Q.T @ y)
    coef = np.empty(k)
    coef[piv] = z
    return LeastSquares(coef, y - X @ coef)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Coefficients with cluster-robust inference.

    ``details`` carries estimator bookkeeping (component fits of the
    debiased estimators, jackknife settings, demeaning sweeps).
    """

    term_names: tuple[str, ...]
    coefficients: np.ndarray
    vcov: np.ndarray
    nobs: int
    n_clusters: int
    r_squared: float
    r_squared_full: float
    estimator: str = "fe"
    n_iter: int = 0
    dist: str = "normal"
    details: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def t_stat(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coefficients / self.se

    @property
    def p_value(self) -> np.ndarray:
        return p_values(self.t_stat, self.dist, self.n_clusters - 1)

    def _crit(self, level: float) -> float:
        q = 0.5 + level / 2
        if self.dist == "t":
            return float(stats.t.ppf(q, self.n_clusters - 1))
        return float(stats.norm.ppf(q))

    def conf_int(self, level: float = 0.95) -> np.ndarray:
        c = self._crit(level)
        return np.column_stack([self.coefficients - c * self.se, self.coefficients + c * self.se])

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.term_names.index(name)])

    def stderr(self, name: str) -> float:
        return float(self.se[self.term_names.index(name)])

    def table(self, level: float = 0.95):
        import pandas as pd

        ci = self.conf_int(level)
        return pd.DataFrame({
            "term": self.term_names,
            "estimate": self.coefficients,
            "se": self.se,
            "t": self.t_stat,
            "p": self.p_value,
            "ci_lo": ci[:, 0],
            "ci_hi": ci[:, 1],
        })

    def with_coefficients(self, coefficients, estimator: str, **details) -> "FitResult":
        merged = dict(self.details)
        merged.update(details)
        return replace(self, coefficients=np.asarray(coefficients, dtype=float),
                       estimator=estimator, details=merged)


def fit_design(design: DesignMatrix, *, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER, small_sample: bool = True,
               dist: str = "normal") -> FitResult:
    """Demean, solve and attach the cluster-robust covariance."""
    dm = design if design.demeaned else demean(design, tol, max_iter)
    coef, resid = ols(dm)
    vcov = cluster_vcov(dm.X, resid, dm.clusters, small_sample=small_sample)
    rss = float(resid @ resid)
    tss_within = float(dm.y @ dm.y)
    r2 = 1.0 - rss / tss_within if tss_within > 0 else float("nan")
    r2_full = 1.0 - rss / design.tss_total if design.tss_total > 0 else float("nan")
    return FitResult(
        term_names=tuple(design.names),
        coefficients=coef,
        vcov=vcov,
        nobs=dm.nobs,
        n_clusters=dm.clusters.n_clusters,
        r_squared=r2,
        r_squared_full=r2_full,
        estimator="fe",
        n_iter=dm.n_iter,
        dist=dist,
    )


def fit_fe(dataset: PanelDataset, spec: RegressionSpec, **kw) -> FitResult:
    """Plain fixed-effects fit: build_design -> demean -> ols -> cluster_vcov.

    The ``estimator`` field of ``spec`` is not consulted; see
    :func:`dynpanel.debias.fit` for dispatch on it.
    """
    return fit_design(build_design(dataset, spec), **kw)
