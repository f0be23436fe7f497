"""Event-study regressions and group-time average treatment effects.

Two estimators of the dynamic effect of a staggered treatment (e.g. school
openings):

* :func:`event_study_fit` regresses the outcome on leads and lags of the
  opening date, one set of weekly dummies per treatment group, with unit
  effects and no time effects.
* :func:`csdid_att` computes unconditional group-time average treatment
  effects against never-treated and not-yet-treated units, with influence
  functions that feed :func:`aggregate_dynamic` and
  :func:`simultaneous_bands`.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import EmptyEventCell, NoValidControl
from .fe import DesignMatrix, FitResult, Term, apply_term, fit_design, _dense
from .panel import PanelDataset

__all__ = [
    "EventStudySpec",
    "EventStudyResult",
    "event_study_frame",
    "event_study_fit",
    "GroupTimeATT",
    "GroupTimeResult",
    "DynamicEffect",
    "Bands",
    "csdid_att",
    "csdid_att_arrays",
    "aggregate_dynamic",
    "simultaneous_bands",
    "write_att_csv",
    "generate_step_panel",
    "ATT_CSV_FIELDS",
    "OPENING_BANDS",
]

ATT_CSV_FIELDS = ("group", "time", "event_time", "att", "se", "band_lo", "band_hi")

# default subsamples by opening date; open ends are None
OPENING_BANDS = {
    "early": (None, "2020-08-23"),
    "middle": ("2020-08-24", "2020-09-06"),
    "late": ("2020-09-07", None),
}


# -- event study --------------------------------------------------------------------

@dataclass(frozen=True)
class EventStudySpec:
    """Leads and lags of an opening date.

    Parameters
    ----------
    outcome : str or Term
        Outcome column (or term).
    group_attr, date_attr : str
        Unit attributes holding the treatment group and the opening date.
        Units with a missing group or date are never treated.
    groups : tuple of str, optional
        Groups that get dummies; defaults to every group seen among treated units.
    lead, lag : int
        Event weeks ``-lead .. lag`` get dummies.  Earlier weeks are the
        reference; treated rows after ``lag`` are dropped.
    date_band : (date, date) or str, optional
        Keep only treated units opening within this closed interval
        (never-treated units are always kept).  Either end may be None.  A
        string names one of :data:`OPENING_BANDS`.
    """

    outcome: str | Term
    group_attr: str = "mode"
    date_attr: str = "open_date"
    groups: tuple[str, ...] | None = None
    lead: int = 8
    lag: int = 8
    date_band: tuple | None = None

    def __post_init__(self):
        if self.lead < 1 or self.lag < 0:
            raise ValueError("lead must be >= 1 and lag >= 0")
        if self.groups is not None:
            object.__setattr__(self, "groups", tuple(self.groups))
        if isinstance(self.date_band, str):
            if self.date_band not in OPENING_BANDS:
                raise ValueError(f"unknown date band {self.date_band!r}")
            object.__setattr__(self, "date_band", OPENING_BANDS[self.date_band])
        elif self.date_band is not None:
            object.__setattr__(self, "date_band", tuple(self.date_band))


def _date(v):
    if v is None or v == "" or (isinstance(v, float) and math.isnan(v)):
        return None
    return np.datetime64(v, "D")


def _opening(dataset: PanelDataset, spec: EventStudySpec):
    groups = dataset.attr(spec.group_attr)
    dates = dataset.attr(spec.date_attr)
    g_out, pos = [], np.full(dataset.n_units, np.nan)
    lo, hi = (None, None) if spec.date_band is None else map(_date, spec.date_band)
    keep = np.ones(dataset.n_units, dtype=bool)
    for i, (g, d) in enumerate(zip(groups, dates)):
        d = _date(d)
        if g in (None, "") or d is None:
            g_out.append(None)
            continue
        if (lo is not None and d < lo) or (hi is not None and d > hi):
            keep[i] = False
        g_out.append(str(g))
        pos[i] = int((d - dataset.dates[0]).astype(int))
    return g_out, pos, keep


def event_study_frame(dataset: PanelDataset, spec: EventStudySpec) -> pd.DataFrame:
    """Unit by event-week means of the outcome with group and event-week labels.

    Treated units are binned by ``floor((day - opening) / 7)``; never-treated
    units by calendar week (``event_week`` is then missing).  Rows of treated
    units beyond the lag window are dropped.
    """
    term = spec.outcome if isinstance(spec.outcome, Term) else Term(spec.outcome)
    y = apply_term(dataset, term)
    groups, pos, keep = _opening(dataset, spec)
    t = np.arange(dataset.n_dates)
    frames = []
    for i in np.flatnonzero(keep):
        if groups[i] is None:
            key = t // 7
            ev = np.full(t.size, np.nan)
        else:
            key = np.floor((t - pos[i]) / 7).astype(int)
            ev = key.astype(float)
        frames.append(pd.DataFrame({"unit_code": i, "key": key, "event_week": ev, "y": y[i]}))
    df = pd.concat(frames, ignore_index=True).dropna(subset=["y"])
    df = (df.groupby(["unit_code", "key"], sort=True)
          .agg(y=("y", "mean"), event_week=("event_week", "first")).reset_index())
    df["group"] = [groups[u] for u in df["unit_code"]]
    df["unit"] = [dataset.unit_ids[u] for u in df["unit_code"]]
    df = df[~(df["event_week"] > spec.lag)].reset_index(drop=True)
    return df[["unit", "unit_code", "group", "event_week", "y"]]


@dataclass(frozen=True, eq=False)
class EventStudyResult:
    fit: FitResult
    keys: tuple  # (group, event_week) per coefficient
    frame: pd.DataFrame

    def coef(self, group: str, week: int) -> float:
        return float(self.fit.coefficients[self.keys.index((group, week))])

    def stderr(self, group: str, week: int) -> float:
        return float(self.fit.se[self.keys.index((group, week))])

    def to_frame(self, level: float = 0.95) -> pd.DataFrame:
        ci = self.fit.conf_int(level)
        return pd.DataFrame({"group": [k[0] for k in self.keys],
                             "event_week": [k[1] for k in self.keys],
                             "coef": self.fit.coefficients, "se": self.fit.se,
                             "ci_lo": ci[:, 0], "ci_hi": ci[:, 1]})


def event_study_fit(dataset: PanelDataset, spec: EventStudySpec, **fit_kw) -> EventStudyResult:
    """Regress weekly outcome means on group-specific event-week dummies and unit effects.

    Standard errors are clustered by unit.  Raises ``EmptyEventCell`` if a
    requested (group, event week) dummy has no observations.
    """
    df = event_study_frame(dataset, spec)
    groups = spec.groups
    if groups is None:
        groups = tuple(sorted({g for g in df["group"] if g is not None}))
    if not groups:
        raise EmptyEventCell(None, None)
    weeks = range(-spec.lead, spec.lag + 1)
    keys = tuple((g, w) for g in groups for w in weeks)
    ev = df["event_week"].to_numpy()
    grp = df["group"].to_numpy(dtype=object)
    X = np.zeros((len(df), len(keys)))
    for k, (g, w) in enumerate(keys):
        X[:, k] = (grp == g) & (ev == w)
        if not X[:, k].any():
            raise EmptyEventCell(g, w)
    units = df["unit_code"].to_numpy()
    y = df["y"].to_numpy(dtype=float)
    design = DesignMatrix(
        rows=np.arange(len(df)), y=y, X=X, names=tuple(f"{g}:{w}" for g, w in keys),
        factor_codes=(_dense(units),), factor_names=("unit",), cluster_codes=_dense(units),
        unit_codes=units, time_codes=np.zeros(len(df), dtype=np.int64),
        tss_total=float(np.sum((y - y.mean()) ** 2)))
    return EventStudyResult(fit_design(design, **fit_kw), keys, df)


# -- group-time effects -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GroupTimeATT:
    """ATT for the cohort starting in period ``group`` at period ``time``.

    ``influence`` has one entry per unit of the estimation sample, scaled so
    that ``se = sqrt(sum(influence**2)) / n``.
    """

    group: int
    time: int
    att: float
    se: float
    n_treated: int
    n_control: int
    influence: np.ndarray = field(repr=False)

    @property
    def event_time(self) -> int:
        return self.time - self.group

    @property
    def low_reliability(self) -> bool:
        return self.n_treated < 2


@dataclass(frozen=True, eq=False)
class GroupTimeResult:
    atts: tuple[GroupTimeATT, ...]
    cohort: np.ndarray  # start period per unit, inf for never treated
    periods: np.ndarray
    unit_ids: tuple

    @property
    def n(self) -> int:
        return self.cohort.size

    def get(self, group, time) -> GroupTimeATT:
        for a in self.atts:
            if a.group == group and a.time == time:
                return a
        raise KeyError((group, time))


def _if_mean(member: np.ndarray, values: np.ndarray, n: int):
    m = values[member].mean()
    psi = np.zeros(n)
    psi[member] = (values[member] - m) * n / member.sum()
    return m, psi


def csdid_att_arrays(Y, cohort, *, periods=None, unit_ids=None,
                     on_missing: str = "raise") -> GroupTimeResult:
    """Group-time ATTs from a balanced ``(n_units, n_periods)`` outcome array.

    ``cohort[i]`` is the period index at which unit ``i`` is first treated
    (``inf`` or NaN for never treated).  The base period of cohort ``g`` is
    ``g - 1`` for every ``t``.  Controls for ``(g, t)`` are never-treated
    units and units first treated after both ``t`` and ``g - 1`` (other than
    cohort ``g``); units already treated at ``t`` or at the base never serve
    as controls.  ``on_missing="skip"`` drops cells without controls instead
    of raising ``NoValidControl``.
    """
    Y = np.asarray(Y, dtype=float)
    n, P = Y.shape
    cohort = np.asarray(cohort, dtype=float).copy()
    cohort[np.isnan(cohort)] = np.inf
    periods = np.arange(P) if periods is None else np.asarray(periods)
    unit_ids = tuple(range(n)) if unit_ids is None else tuple(unit_ids)
    if np.isnan(Y).any():
        raise ValueError("outcome array must be balanced without missing values")
    early = cohort <= 0
    if early.any():
        warnings.warn(f"{int(early.sum())} units treated in the first period have no base "
                      "period and are dropped", RuntimeWarning, stacklevel=2)
        keep = ~early
        Y, cohort = Y[keep], cohort[keep]
        unit_ids = tuple(u for u, k in zip(unit_ids, keep) if k)
        n = Y.shape[0]
    cohort[cohort >= P] = np.inf
    out = []
    for g in np.unique(cohort[np.isfinite(cohort)]).astype(int):
        base = g - 1
        treated = cohort == g
        for t in range(P):
            if t == base:
                continue
            control = (cohort > max(t, base)) & (cohort != g)
            if not control.any():
                if on_missing == "skip":
                    continue
                raise NoValidControl(int(periods[g]) if np.ndim(periods[g]) == 0 else periods[g],
                                     periods[t])
            dy = Y[:, t] - Y[:, base]
            mt, psi_t = _if_mean(treated, dy, n)
            mc, psi_c = _if_mean(control, dy, n)
            psi = psi_t - psi_c
            out.append(GroupTimeATT(int(g), int(t), float(mt - mc),
                                    float(np.sqrt(np.sum(psi ** 2)) / n),
                                    int(treated.sum()), int(control.sum()), psi))
    return GroupTimeResult(tuple(out), cohort, periods, unit_ids)


def csdid_att(dataset: PanelDataset, outcome: str | Term, start: str | Mapping = "open_date",
              *, period: str = "week", on_missing: str = "raise") -> GroupTimeResult:
    """Group-time ATTs on a panel, treatment starting at each unit's opening date.

    ``start`` is a unit attribute name or a mapping unit -> date (missing for
    never treated).  With ``period="week"`` daily outcomes are averaged within
    calendar weeks counted from the first date and cohorts are the week of
    opening.  Units with any missing period are dropped.
    """
    term = outcome if isinstance(outcome, Term) else Term(outcome)
    y = apply_term(dataset, term)
    if isinstance(start, str):
        starts = dataset.attr(start)
    else:
        starts = [start.get(u) for u in dataset.unit_ids]
    pos = np.array([np.nan if _date(d) is None else
                    float((_date(d) - dataset.dates[0]).astype(int)) for d in starts])
    if period == "week":
        weeks = np.arange(dataset.n_dates) // 7
        n_p = int(weeks[-1]) + 1
        Y = np.stack([np.nanmean(y[:, weeks == w], axis=1) if np.any(~np.isnan(y[:, weeks == w]))
                      else np.full(y.shape[0], np.nan) for w in range(n_p)], axis=1) \
            if y.size else y
        cohort = np.floor(pos / 7)
        periods = dataset.dates[::7]
    elif period == "day":
        Y, cohort, periods = y, pos, dataset.dates
    else:
        raise ValueError("period must be 'week' or 'day'")
    complete = ~np.isnan(Y).any(axis=1)
    if not complete.all():
        warnings.warn(f"dropping {int((~complete).sum())} units with missing periods",
                      RuntimeWarning, stacklevel=2)
    units = [u for u, k in zip(dataset.unit_ids, complete) if k]
    return csdid_att_arrays(Y[complete], cohort[complete], periods=periods, unit_ids=units,
                            on_missing=on_missing)


@dataclass(frozen=True, eq=False)
class DynamicEffect:
    event_time: int
    att: float
    se: float
    groups: tuple
    weights: np.ndarray
    influence: np.ndarray = field(repr=False)


def aggregate_dynamic(result: GroupTimeResult, event_times=None) -> list[DynamicEffect]:
    """Average ``ATT(g, g+e)`` across cohorts with weights proportional to cohort size.

    The influence function adds the estimation error of the cohort shares to
    the weighted cell influence functions.
    """
    if not result.atts:
        raise ValueError("no group-time effects to aggregate")
    n = result.n
    by_e: dict[int, list[GroupTimeATT]] = {}
    for a in result.atts:
        by_e.setdefault(a.event_time, []).append(a)
    if event_times is None:
        event_times = sorted(by_e)
    out = []
    for e in event_times:
        cells = sorted(by_e.get(e, []), key=lambda a: a.group)
        if not cells:
            continue
        member = np.array([result.cohort == a.group for a in cells], dtype=float)  # (K, n)
        pi = member.mean(axis=1)
        S = pi.sum()
        w = pi / S
        att = np.array([a.att for a in cells])
        psi_pi = member - pi[:, None]
        psi_w = (psi_pi * S - pi[:, None] * psi_pi.sum(axis=0)) / S ** 2
        psi = w @ np.array([a.influence for a in cells]) + att @ psi_w
        theta = float(w @ att)
        out.append(DynamicEffect(int(e), theta, float(np.sqrt(np.sum(psi ** 2)) / n),
                                 tuple(a.group for a in cells), w, psi))
    return out


@dataclass(frozen=True, eq=False)
class Bands:
    crit: float
    lo: np.ndarray
    hi: np.ndarray
    pointwise_crit: float


def simultaneous_bands(effects: Sequence, level: float = 0.95, B: int = 1000,
                       seed: int = 0) -> Bands:
    """Sup-t simultaneous bands by multiplier bootstrap of the influence functions.

    Each draw multiplies the influence functions by independent Rademacher
    weights; the critical value is the ``level`` quantile of the largest
    absolute t-ratio.  It is never below the pointwise normal value, so the
    bands always contain the pointwise ones.
    """
    if B < 100:
        raise ValueError("need at least 100 bootstrap draws")
    effects = list(effects)
    if not effects:
        raise ValueError("no effects")
    psi = np.array([e.influence for e in effects])  # (K, n)
    n = psi.shape[1]
    est = np.array([e.att for e in effects])
    se = np.array([e.se for e in effects])
    ok = se > 0
    rng = np.random.Generator(np.random.PCG64(seed))
    tmax = np.empty(B)
    chunk = max(1, min(B, 2_000_000 // max(n, 1)))
    for start in range(0, B, chunk):
        b = min(chunk, B - start)
        v = rng.integers(0, 2, size=(b, n)) * 2.0 - 1.0
        draws = v @ psi[ok].T / n  # (b, K)
        tmax[start:start + b] = np.max(np.abs(draws) / se[ok], axis=1) if ok.any() else 0.0
    z = float(stats.norm.ppf(0.5 + level / 2))
    crit = max(float(np.quantile(tmax, level)), z)
    return Bands(crit, est - crit * se, est + crit * se, z)


def write_att_csv(path, result: GroupTimeResult, bands: Bands | None = None) -> None:
    """Tidy CSV with columns ``group,time,event_time,att,se,band_lo,band_hi``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATT_CSV_FIELDS)
        for k, a in enumerate(result.atts):
            lo = repr(float(bands.lo[k])) if bands is not None else ""
            hi = repr(float(bands.hi[k])) if bands is not None else ""
            w.writerow([str(result.periods[a.group]), str(result.periods[a.time]), a.event_time,
                        repr(a.att), repr(a.se), lo, hi])


def generate_step_panel(n_units: int = 60, n_days: int = 140, *, effect: float = 1.0,
                        noise: float = 0.0, groups=("inperson", "hybrid"),
                        never_share: float = 1 / 3, open_window=(49, 91), seed: int = 0,
                        start_date: str = "2020-06-01") -> PanelDataset:
    """Panel whose outcome jumps by ``effect`` on each treated unit's opening day.

    ``y = alpha_i + effect * 1{t >= opening} + noise * e``.  Treated units
    cycle through ``groups``; a ``never_share`` fraction never opens.
    Attributes ``mode`` and ``open_date`` match :class:`EventStudySpec`
    defaults.
    """
    if not 0 < open_window[0] <= open_window[1] < n_days:
        raise ValueError("open_window must lie inside (0, n_days)")
    rng = np.random.Generator(np.random.PCG64(seed))
    dates = np.datetime64(start_date, "D") + np.arange(n_days)
    units = tuple(f"u{i:0{len(str(n_units - 1))}d}" for i in range(n_units))
    never = rng.random(n_units) < never_share
    opening = rng.integers(open_window[0], open_window[1] + 1, n_units)
    mode = tuple(None if nv else groups[i % len(groups)] for i, nv in enumerate(never))
    open_date = tuple(None if nv else str(dates[o]) for o, nv in zip(opening, never))
    on = (np.arange(n_days)[None, :] >= opening[:, None]) & ~never[:, None]
    y = rng.normal(size=(n_units, 1)) + effect * on + noise * rng.normal(size=(n_units, n_days))
    return PanelDataset(units, dates, {"y": y}, {"mode": mode, "open_date": open_date})
