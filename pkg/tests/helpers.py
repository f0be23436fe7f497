"""Shared builders and brute-force oracles for the test suite."""
from __future__ import annotations

import numpy as np

from dynpanel.fe import RegressionSpec, Term
from dynpanel.panel import PanelDataset

START = np.datetime64("2020-01-01")


def unit_ids(n):
    return tuple(f"u{i:03d}" for i in range(n))


def dummies(codes) -> np.ndarray:
    codes = np.asarray(codes)
    D = np.zeros((codes.size, int(codes.max()) + 1))
    D[np.arange(codes.size), codes] = 1.0
    return D


def dummy_ols(y, X, factor_codes):
    """Coefficients on ``X`` from OLS with every factor dummy spelled out.

    The dummy block is collinear (one redundant column per extra factor);
    lstsq returns the minimum-norm solution, whose ``X`` part is the
    identified one.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    blocks = [X] + [dummies(c) for c in factor_codes]
    Z = np.column_stack(blocks)
    coef, *_ = np.linalg.lstsq(Z, np.asarray(y, dtype=float), rcond=None)
    return coef[:X.shape[1]]


def explicit_cluster_vcov(X, e, clusters, small_sample=True):
    """Sandwich covariance by a literal loop over clusters."""
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((k, k))
    labels = sorted(set(clusters))
    for g in labels:
        rows = [r for r in range(n) if clusters[r] == g]
        s = X[rows].T @ e[rows]
        meat += np.outer(s, s)
    V = bread @ meat @ bread
    if small_sample:
        G = len(labels)
        V *= G / (G - 1) * (n - 1) / (n - k)
    return V


def two_factor_panel(n_units=20, n_days=30, n_states=4, beta=(0.5, -0.2), noise=0.1, seed=0):
    """Panel with unit effects, state-by-week effects and two regressors."""
    rng = np.random.default_rng(seed)
    state = np.arange(n_units) % n_states
    weeks = np.arange(n_days) // 7
    alpha = rng.normal(size=(n_units, 1))
    delta = rng.normal(size=(n_states, weeks.max() + 1))[state][:, weeks]
    x1 = rng.normal(size=(n_units, n_days)) + 0.5 * alpha
    x2 = rng.normal(size=(n_units, n_days)) + 0.3 * delta
    y = beta[0] * x1 + beta[1] * x2 + alpha + delta + noise * rng.normal(size=(n_units, n_days))
    units = unit_ids(n_units)
    states = tuple(f"s{s}" for s in state)
    return PanelDataset(units, START + np.arange(n_days), {"y": y, "x1": x1, "x2": x2},
                        {"state": states}, dict(zip(units, states)))


TWO_FACTOR_SPEC = RegressionSpec(Term("y"), (Term("x1"), Term("x2")), ("unit", "state*week"),
                                 "state")


def ar1_panel(n_units=300, n_days=20, rho=0.5, sigma=1.0, seed=0):
    """``y_it = alpha_i + rho y_i,t-1 + e_it`` started from the stationary law."""
    rng = np.random.default_rng(seed)
    alpha = rng.normal(size=n_units)
    y = np.empty((n_units, n_days))
    y[:, 0] = alpha / (1 - rho) + sigma * rng.normal(size=n_units) / np.sqrt(1 - rho ** 2)
    for t in range(1, n_days):
        y[:, t] = alpha + rho * y[:, t - 1] + sigma * rng.normal(size=n_units)
    return PanelDataset(unit_ids(n_units), START + np.arange(n_days), {"y": y})


AR1_SPEC = RegressionSpec(Term("y"), (Term("y", lag=1),), ("unit",), "unit")


def static_panel(n_units=100, n_days=20, beta=1.0, noise=1.0, seed=0):
    """Strictly exogenous regressor with unit effects; no dynamics."""
    rng = np.random.default_rng(seed)
    alpha = rng.normal(size=(n_units, 1))
    x = rng.normal(size=(n_units, n_days)) + alpha
    y = beta * x + alpha + noise * rng.normal(size=(n_units, n_days))
    return PanelDataset(unit_ids(n_units), START + np.arange(n_days), {"y": y, "x": x})


STATIC_SPEC = RegressionSpec(Term("y"), (Term("x"),), ("unit",), "unit")


def staggered_arrays(n_units=200, n_periods=8, cohorts=(3, 4, 5), never_share=0.4,
                     effect=lambda e: 0.1 * e, noise=1.0, rng=None):
    """Parallel-trends panel with staggered adoption and event-time effects."""
    rng = rng if rng is not None else np.random.default_rng(0)
    cohort = np.where(rng.random(n_units) < never_share, np.inf,
                      rng.choice(cohorts, size=n_units))
    t = np.arange(n_periods)
    e = t[None, :] - cohort[:, None]
    treated = e >= 0
    Y = (rng.normal(size=(n_units, 1)) + 0.3 * t[None, :]
         + np.where(treated, effect(np.where(treated, e, 0)), 0.0)
         + noise * rng.normal(size=(n_units, n_periods)))
    return Y, cohort
