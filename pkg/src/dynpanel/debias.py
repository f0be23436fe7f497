"""Crossover jackknife bias correction for dynamic fixed-effects panels.

With unit fixed effects and lagged outcomes, the within estimator carries a
bias of order ``1/T``.  The correction compares the full-sample estimate with
estimates that give every unit separate intercepts in the two halves of the
time window; each half then has roughly half the time span and twice the bias,
so ``2 * full - split`` removes the leading term.

Units are shuffled by Fisher-Yates on a PCG64 stream seeded with the
specification's ``rng_seed``; the first ``ceil(N/2)`` shuffled units form the
first group.  Partitions are drawn sequentially from one stream, so the same
seed reproduces the same ``J`` partitions for both corrected estimators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import NoSecondHalf, TooFewUnits
from .fe import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    DesignMatrix,
    FitResult,
    RegressionSpec,
    build_design,
    demean,
    fit_design,
    ols,
    _dense,
)
from .panel import PanelDataset

__all__ = [
    "CrossoverPartition",
    "Crossover",
    "partition_units",
    "build_crossover_subpanel",
    "half_masks",
    "fit_debiased",
    "fit_debiased_cbc",
    "fit",
]

RNG_NAME = "PCG64"
RNG_VERSION = 1


@dataclass(frozen=True)
class CrossoverPartition:
    j: int
    n1: tuple
    n2: tuple

    def __post_init__(self):
        if set(self.n1) & set(self.n2):
            raise ValueError("unit groups must be disjoint")
        if abs(len(self.n1) - len(self.n2)) > 1:
            raise ValueError("unit groups must differ in size by at most one")


def _fisher_yates(items: list, rng: np.random.Generator) -> list:
    items = list(items)
    for i in range(len(items) - 1, 0, -1):
        k = int(rng.integers(0, i + 1))
        items[i], items[k] = items[k], items[i]
    return items


def partition_units(units: Sequence, J: int, seed: int) -> list[CrossoverPartition]:
    """Draw ``J`` random half splits of ``units`` from a seeded generator."""
    units = sorted(set(units))
    if len(units) < 2:
        raise TooFewUnits("need at least two units to split")
    if J < 1:
        raise ValueError("J must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    half = math.ceil(len(units) / 2)
    out = []
    for j in range(J):
        order = _fisher_yates(units, rng)
        out.append(CrossoverPartition(j, tuple(sorted(order[:half])), tuple(sorted(order[half:]))))
    return out


def half_masks(design: DesignMatrix):
    """Boolean masks of rows in the first and second half of the time window.

    The window runs over the calendar positions present in the design,
    ``1..T``; the first half is ``t <= ceil(T/2)`` and the second
    ``t >= floor(T/2 + 1)``, so the middle period of an odd window is in both.
    Returns ``(first, second, T)``.
    """
    t = design.time_codes - design.time_codes.min() + 1
    T = int(t.max())
    first = t <= math.ceil(T / 2)
    second = t >= math.floor(T / 2 + 1)
    return first, second, T


def _unit_factor(design: DesignMatrix) -> int:
    try:
        return design.factor_names.index("unit")
    except ValueError:
        raise ValueError("crossover correction needs a 'unit' fixed-effect factor") from None


class Crossover(NamedTuple):
    design: DesignMatrix
    partition: CrossoverPartition
    degenerate: bool


def _group_mask(design: DesignMatrix, unit_ids: Sequence, group: Sequence) -> np.ndarray:
    members = np.isin(np.asarray(unit_ids, dtype=object), np.asarray(group, dtype=object))
    return members[design.unit_codes]


def build_crossover_subpanel(partition: CrossoverPartition, design: DesignMatrix,
                             unit_ids: Sequence | None = None,
                             split_factors: bool = False) -> Crossover:
    """Full design with each unit's intercept split at the time midpoint.

    Every unit gets one fixed-effect level for the first half and another for
    the second half.  Rows of the middle period of an odd-length window are
    duplicated, once per half.  With ``split_factors`` the remaining factors
    are also made specific to the two crossover subpanels (which requires
    ``unit_ids`` to map ``design.unit_codes`` to the partition's ids).
    A window of a single period cannot be split: the design is returned
    unchanged and flagged ``degenerate``.
    """
    uf = _unit_factor(design)
    first, second, T = half_masks(design)
    if T < 2:
        return Crossover(design, partition, True)
    idx = np.concatenate([np.flatnonzero(first), np.flatnonzero(second)])
    half = np.concatenate([np.zeros(first.sum(), dtype=np.int64),
                           np.ones(second.sum(), dtype=np.int64)])
    sub = _take(design, idx)
    codes = list(sub.factor_codes)
    codes[uf] = _dense(sub.unit_codes * 2 + half)
    if split_factors:
        if unit_ids is None:
            raise ValueError("split_factors needs unit_ids")
        in_n1 = _group_mask(sub, unit_ids, partition.n1)
        # S1 = (N1, first half) + (N2, second half); S2 is the complement
        panel = np.where(in_n1, half, 1 - half)
        for k, c in enumerate(codes):
            if k != uf:
                codes[k] = _dense(c * 2 + panel)
    return Crossover(replace(sub, factor_codes=tuple(codes)), partition, False)


def _take(design: DesignMatrix, idx: np.ndarray) -> DesignMatrix:
    return replace(
        design, rows=design.rows[idx], y=design.y[idx], X=design.X[idx],
        factor_codes=tuple(c[idx] for c in design.factor_codes),
        cluster_codes=design.cluster_codes[idx], unit_codes=design.unit_codes[idx],
        time_codes=design.time_codes[idx])


def _coef(design: DesignMatrix, tol, max_iter) -> np.ndarray:
    return ols(demean(design, tol, max_iter)).coef


def _setup(dataset: PanelDataset, spec: RegressionSpec, J, seed):
    J = spec.jackknife if J is None else J
    seed = spec.rng_seed if seed is None else seed
    design = build_design(dataset, spec)
    _, _, T = half_masks(design)
    if T < 2:
        raise NoSecondHalf("the time window has a single period; no second half to split off")
    units = [dataset.unit_ids[u] for u in np.unique(design.unit_codes)]
    return design, partition_units(units, J, seed), J, seed


def fit_debiased(dataset: PanelDataset, spec: RegressionSpec, *, J: int | None = None,
                 seed: int | None = None, split_factors: bool = False,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 **fit_kw) -> FitResult:
    """Crossover jackknife estimate ``2 * full - mean_j(crossover_j)``.

    The covariance is the full-sample cluster-robust one; only the point
    estimates change.  Component estimates are kept in ``details``.
    """
    design, parts, J, seed = _setup(dataset, spec, J, seed)
    full = fit_design(design, tol=tol, max_iter=max_iter, **fit_kw)
    cross = np.array([
        _coef(build_crossover_subpanel(p, design, dataset.unit_ids, split_factors).design,
              tol, max_iter)
        for p in parts])
    bc = 2 * full.coefficients - cross.mean(axis=0)
    return full.with_coefficients(
        bc, "bc", jackknife=J, seed=seed, rng=f"{RNG_NAME}/v{RNG_VERSION}",
        full_coef=full.coefficients.copy(), crossover_coefs=cross, partitions=parts)


def fit_debiased_cbc(dataset: PanelDataset, spec: RegressionSpec, *, J: int | None = None,
                     seed: int | None = None, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, **fit_kw) -> FitResult:
    """``2 * full - mean_j((fit(S1_j) + fit(S2_j)) / 2)`` over the two crossover subpanels.

    ``S1_j`` holds the first half of group one and the second half of group
    two; ``S2_j`` the rest.  Each subpanel is fitted on its own, with every
    fixed effect re-estimated and empty levels dropped.
    """
    design, parts, J, seed = _setup(dataset, spec, J, seed)
    full = fit_design(design, tol=tol, max_iter=max_iter, **fit_kw)
    first, second, _ = half_masks(design)
    sub = []
    for p in parts:
        in_n1 = _group_mask(design, dataset.unit_ids, p.n1)
        s1 = (in_n1 & first) | (~in_n1 & second)
        s2 = (~in_n1 & first) | (in_n1 & second)
        sub.append([_coef(design.subset(s1), tol, max_iter),
                    _coef(design.subset(s2), tol, max_iter)])
    sub = np.array(sub)
    cbc = 2 * full.coefficients - sub.mean(axis=1).mean(axis=0)
    return full.with_coefficients(
        cbc, "cbc", jackknife=J, seed=seed, rng=f"{RNG_NAME}/v{RNG_VERSION}",
        full_coef=full.coefficients.copy(), subpanel_coefs=sub, partitions=parts)


def fit(dataset: PanelDataset, spec: RegressionSpec, **kw) -> FitResult:
    """Dispatch on ``spec.estimator``."""
    if spec.estimator == "fe":
        kw.pop("split_factors", None)
        return fit_design(build_design(dataset, spec), **kw)
    if spec.estimator == "bc":
        return fit_debiased(dataset, spec, **kw)
    kw.pop("split_factors", None)
    return fit_debiased_cbc(dataset, spec, **kw)
