"""Cluster-robust covariance estimators."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .errors import DegenerateClustering, SingleCluster

__all__ = [
    "ClusterAssignment",
    "cluster_vcov",
    "oneway_mean_variance",
    "twoway_cluster_mean_se",
    "p_values",
]


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Dense cluster ids ``0..n_clusters-1``, one per design row."""

    codes: np.ndarray
    n_clusters: int

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 1 or not np.issubdtype(codes.dtype, np.integer):
            raise ValueError("cluster codes must be a 1-D integer array")
        if codes.size and (codes.min() < 0 or codes.max() >= self.n_clusters):
            raise ValueError("cluster codes must lie in [0, n_clusters)")
        object.__setattr__(self, "codes", codes)

    @classmethod
    def from_labels(cls, labels) -> "ClusterAssignment":
        _, codes = np.unique(np.asarray(labels), return_inverse=True)
        codes = codes.reshape(-1)
        return cls(codes, int(codes.max()) + 1 if codes.size else 0)


def _as_assignment(clusters) -> ClusterAssignment:
    if isinstance(clusters, ClusterAssignment):
        return clusters
    return ClusterAssignment.from_labels(clusters)


def _group_sums(codes, values, n_groups):
    """Sum rows of ``values`` (n, k) within groups -> (n_groups, k)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.bincount(codes, weights=values, minlength=n_groups)
    k = values.shape[1]
    flat = (codes[:, None] * k + np.arange(k)).ravel()
    return np.bincount(flat, weights=values.ravel(), minlength=n_groups * k).reshape(n_groups, k)


def cluster_vcov(design, residuals, clusters, *, small_sample: bool = True,
                 n_params: int | None = None) -> np.ndarray:
    """Cluster-robust sandwich covariance of least-squares coefficients.

    ``V = c (X'X)^-1 (sum_g s_g s_g') (X'X)^-1`` with ``s_g`` the sum of
    ``x_r e_r`` over rows of cluster ``g`` and
    ``c = G/(G-1) * (n-1)/(n-k)`` when ``small_sample`` is set.

    Parameters
    ----------
    design : DesignMatrix or array_like
        Demeaned regressors; anything with an ``X`` attribute or an
        ``(n, k)`` array.
    residuals : array_like
        Residuals aligned to the design rows.
    clusters : ClusterAssignment or array_like
        Cluster label per row.
    n_params : int, optional
        ``k`` in the small-sample factor; defaults to the number of columns.
    """
    X = np.asarray(getattr(design, "X", design), dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    e = np.asarray(residuals, dtype=float).reshape(-1)
    cl = _as_assignment(clusters)
    n, k = X.shape
    if e.size != n or cl.codes.size != n:
        raise ValueError("design, residuals and clusters must have the same number of rows")
    if cl.n_clusters < 2:
        raise SingleCluster("cluster-robust covariance needs at least two clusters")

    # canonical row order makes the result independent of the input order
    order = np.lexsort(np.column_stack([X, e, cl.codes]).T[::-1])
    X, e, codes = X[order], e[order], cl.codes[order]

    R = linalg.qr(X, mode="r")[0][:k]
    Rinv = linalg.solve_triangular(R, np.eye(k))
    bread = Rinv @ Rinv.T
    scores = _group_sums(codes, X * e[:, None], cl.n_clusters)
    meat = scores.T @ scores
    V = bread @ meat @ bread
    if small_sample:
        G = cl.n_clusters
        kk = k if n_params is None else n_params
        V = V * (G / (G - 1)) * ((n - 1) / (n - kk))
    return (V + V.T) / 2


def oneway_mean_variance(values, codes, *, small_sample: bool = True) -> float:
    """Cluster-robust variance of a sample mean under one grouping."""
    y = np.asarray(values, dtype=float)
    cl = _as_assignment(codes)
    n = y.size
    s = _group_sums(cl.codes, y - y.mean(), cl.n_clusters)
    v = float(np.sum(s ** 2)) / n ** 2
    if small_sample:
        G = cl.n_clusters
        v *= G / (G - 1)
    return v


def twoway_cluster_mean_se(series, unit_codes, time_codes, *, small_sample: bool = True):
    """Mean and two-way (unit and time) clustered standard error.

    ``V = V_unit + V_time - V_cell`` where each term is the one-way clustered
    variance of the mean and cells are the (unit, time) intersections.  A
    negative total is floored at ``V_cell`` with a warning.  Missing values
    are dropped first.

    Returns
    -------
    (mean, se) : tuple of float
    """
    y = np.asarray(series, dtype=float).reshape(-1)
    u = np.asarray(unit_codes).reshape(-1)
    t = np.asarray(time_codes).reshape(-1)
    keep = ~np.isnan(y)
    y, u, t = y[keep], u[keep], t[keep]
    cu = ClusterAssignment.from_labels(u)
    ct = ClusterAssignment.from_labels(t)
    if cu.n_clusters < 2 or ct.n_clusters < 2:
        raise DegenerateClustering("two-way clustering needs >= 2 unit and >= 2 time clusters")
    cells = ClusterAssignment.from_labels(cu.codes.astype(np.int64) * ct.n_clusters + ct.codes)
    v_cell = oneway_mean_variance(y, cells, small_sample=small_sample)
    v = (oneway_mean_variance(y, cu, small_sample=small_sample)
         + oneway_mean_variance(y, ct, small_sample=small_sample) - v_cell)
    if v < 0:
        warnings.warn("two-way clustered variance is negative; using the cell-clustered value",
                      RuntimeWarning, stacklevel=2)
        v = v_cell
    return float(y.mean()), float(np.sqrt(v))


def p_values(t_stat, dist: str = "normal", df: int | None = None) -> np.ndarray:
    """Two-sided p-values from the normal or Student-t reference distribution."""
    t_stat = np.abs(np.asarray(t_stat, dtype=float))
    if dist == "normal":
        return 2 * stats.norm.sf(t_stat)
    if dist == "t":
        if df is None or df < 1:
            raise ValueError("t reference distribution needs df >= 1")
        return 2 * stats.t.sf(t_stat, df)
    raise ValueError(f"unknown reference distribution {dist!r}")
