"""Case, death and mobility regression specifications and the sensitivity grid.

Regressors other than lagged outcomes and test growth are 7-day trailing
means of the daily series, lagged to reflect the delay between infection and
reporting.  Every builder is a pure function of its arguments, so the same
variant always yields the same specification document.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .debias import fit
from .errors import DynPanelError
from .fe import FitResult, RegressionSpec, Term
from .panel import MODES, PanelDataset

__all__ = [
    "Columns",
    "Variant",
    "SensitivityGrid",
    "GridRow",
    "build_case_spec",
    "build_death_spec",
    "build_behavior_spec",
    "run_grid",
    "stars",
    "format_table",
    "BEHAVIOR_OUTCOMES",
]

STAR_LEVELS = (0.01, 0.05, 0.1)


@dataclass(frozen=True)
class Columns:
    """Dataset column names used by the builders.

    Set ``college`` to ``None`` or ``npis`` to ``()`` to drop those regressor
    groups (for instance on synthetic panels with a single policy).
    """

    cases: str = "cases"
    deaths: str = "deaths"
    tests: str | None = "tests"
    population: str = "population"
    k12: str = "k12_visits"
    college: str | None = "college_visits"
    npis: tuple[str, ...] = ("mask_mandate", "ban_gathering", "stay_home")
    shares: tuple[str, ...] = tuple(f"{m}_share" for m in MODES)
    no_mask: str = "no_mask"
    venues: tuple[str, ...] = ("restaurant_visits", "bar_visits", "recreation_visits",
                               "church_visits")
    work: tuple[str, ...] = ("fulltime_visits", "parttime_visits", "home_share")
    state: str = "state"

    @classmethod
    def from_dict(cls, d) -> "Columns":
        d = dict(d or {})
        for k in ("npis", "shares", "venues", "work"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Variant:
    """One row of the sensitivity grid.

    ``lag`` replaces the policy/visit lag (``None`` keeps the default),
    ``zero_value`` is the log of a zero weekly count in the outcome, and
    ``controls`` names extra regressor sets among ``lagged``, ``venues`` and
    ``work``.
    """

    id: str
    description: str
    lag: int | None = None
    zero_value: float = -1.0
    controls: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        bad = set(self.controls) - {"lagged", "venues", "work"}
        if bad:
            raise ValueError(f"unknown control sets {sorted(bad)}")


BASELINE = Variant("1", "baseline")


def _policy(column, lag, name, interact=None):
    return Term(column, lag, ("ma:7",), interact, name)


def _log_counts(column, lag, name):
    return Term(column, lag, ("sum:7", "log"), name=name)


def _school_terms(cols: Columns, table_column: int, lag: int) -> list[Term]:
    if table_column in (1, 2):
        terms = [_policy(cols.k12, lag, "k12_visits")]
        if table_column == 2:
            terms.append(_policy(cols.k12, lag, "k12_visits_x_no_mask", cols.no_mask))
        return terms
    if table_column in (3, 4):
        terms = [_policy(c, lag, c) for c in cols.shares]
        if table_column == 4:
            # remote x no-mask is not in the table; no-mask alone is absorbed by the unit effect
            terms += [_policy(c, lag, f"{c}_x_no_mask", cols.no_mask) for c in cols.shares[:2]]
        return terms
    raise ValueError("table_column must be 1, 2, 3 or 4")


def _controls(cols: Columns, variant: Variant, counts: str, lags, base_lag: int) -> list[Term]:
    out = []
    if "lagged" in variant.controls:
        extra = lags[-1] + 7
        out.append(_log_counts(counts, extra, f"log_{counts}_L{extra}"))
        out.append(Term(counts, base_lag, ("cumsum", f"per:{cols.population}"),
                        name=f"cum_{counts}_per_capita_L{base_lag}"))
    if "venues" in variant.controls:
        for c in cols.venues:
            for k in (base_lag, base_lag + 14):
                out.append(_policy(c, k, f"{c}_L{k}"))
    if "work" in variant.controls:
        out += [_policy(c, base_lag, f"{c}_L{base_lag}") for c in cols.work]
    return out


def _common(cols: Columns, lag: int) -> list[Term]:
    terms = []
    if cols.college:
        terms.append(_policy(cols.college, lag, "college_visits"))
    terms += [_policy(c, lag, c) for c in cols.npis]
    return terms


def build_case_spec(variant: Variant = BASELINE, *, table_column: int = 1,
                    columns: Columns | None = None, **spec_kw) -> RegressionSpec:
    """Weekly case growth on lagged school, policy and case variables.

    Outcome: 7-day log difference of weekly cases.  Regressors: school terms
    for the chosen table column, college visits and NPIs (all at the variant
    lag, default 14), log weekly cases lagged 14/21/28 and unlagged test
    growth.  Unit and state-by-week effects, clustered by state.
    """
    cols = columns or Columns()
    lag = 14 if variant.lag is None else variant.lag
    lags = (14, 21, 28)
    terms = _school_terms(cols, table_column, lag) + _common(cols, lag)
    terms += [_log_counts(cols.cases, k, f"log_cases_L{k}") for k in lags]
    if cols.tests:
        terms.append(Term(cols.tests, 0, ("sum:7", "log", "diff:7"), name="test_growth"))
    terms += _controls(cols, variant, cols.cases, lags, 14)
    outcome = Term(cols.cases, 0, ("sum:7", f"log:{variant.zero_value:g}", "diff:7"),
                   name="case_growth")
    kw = dict(fe_factors=("unit", f"{cols.state}*week"), cluster_var=cols.state,
              name=f"case_col{table_column}_v{variant.id}")
    kw.update(spec_kw)
    return RegressionSpec(outcome, tuple(terms), **kw)


def build_death_spec(variant: Variant = BASELINE, *, table_column: int = 1,
                     columns: Columns | None = None, **spec_kw) -> RegressionSpec:
    """Three-week death growth on variables lagged 35 days and log deaths lagged 35/42/49."""
    cols = columns or Columns()
    lag = 35 if variant.lag is None else variant.lag
    lags = (35, 42, 49)
    terms = _school_terms(cols, table_column, lag) + _common(cols, lag)
    terms += [_log_counts(cols.deaths, k, f"log_deaths_L{k}") for k in lags]
    terms += _controls(cols, variant, cols.deaths, lags, 35)
    outcome = Term(cols.deaths, 0, ("sum:7", f"log:{variant.zero_value:g}", "diff:21"),
                   name="death_growth")
    kw = dict(fe_factors=("unit", f"{cols.state}*week"), cluster_var=cols.state,
              name=f"death_col{table_column}_v{variant.id}")
    kw.update(spec_kw)
    return RegressionSpec(outcome, tuple(terms), **kw)


BEHAVIOR_OUTCOMES = {
    "fulltime": "fulltime_visits",
    "stay_home": "home_share",
    "restaurant": "restaurant_visits",
    "bar": "bar_visits",
}


def build_behavior_spec(outcome: str, *, modes: bool = False,
                        columns: Columns | None = None, **spec_kw) -> RegressionSpec:
    """Mobility on contemporaneous school and policy variables and log cases at lags 0/7/14.

    ``outcome`` is a key of ``BEHAVIOR_OUTCOMES`` or a column name.  With
    ``modes`` the teaching-mode shares replace K-12 visits.
    """
    cols = columns or Columns()
    column = BEHAVIOR_OUTCOMES.get(outcome, outcome)
    terms = _school_terms(cols, 3 if modes else 1, 0) + _common(cols, 0)
    terms += [_log_counts(cols.cases, k, f"log_cases_L{k}") for k in (0, 7, 14)]
    kw = dict(fe_factors=("unit", f"{cols.state}*week"), cluster_var=cols.state,
              name=f"behavior_{outcome}{'_modes' if modes else ''}")
    kw.update(spec_kw)
    return RegressionSpec(Term(column, 0, ("ma:7",), name=column), tuple(terms), **kw)


# -- sensitivity grid --------------------------------------------------------------

def _default_variants(kind: str) -> tuple[Variant, ...]:
    short, long_ = (10, 18) if kind == "case" else (42, 49)
    noun = "cases" if kind == "case" else "deaths"
    return (
        BASELINE,
        Variant("2", f"policy and visit lag {short} days", lag=short),
        Variant("3", f"policy and visit lag {long_} days", lag=long_),
        Variant("4", f"log of zero weekly {noun} set to 0", zero_value=0.0),
        Variant("5", f"add 5-week lagged log {noun} and cumulative {noun} per capita",
                controls=("lagged",)),
        Variant("6", "add venue visits at 2 and 4 weeks", controls=("venues",)),
        Variant("7", "add workplace visits and stay-home share", controls=("work",)),
        Variant("8", "all of (5)-(7)", controls=("lagged", "venues", "work")),
    )


@dataclass(frozen=True)
class SensitivityGrid:
    """Variants of one baseline specification.

    ``kind`` is ``"case"`` or ``"death"``; ``table_column`` picks the
    school-variable block of the baseline; ``tracked`` lists the term names
    reported per variant.
    """

    kind: str = "case"
    table_column: int = 1
    variants: tuple[Variant, ...] = ()
    tracked: tuple[str, ...] = ()
    columns: Columns = field(default_factory=Columns)
    jackknife: int = 2
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("case", "death"):
            raise ValueError("grid kind must be 'case' or 'death'")
        if not self.variants:
            object.__setattr__(self, "variants", _default_variants(self.kind))
        object.__setattr__(self, "variants", tuple(self.variants))
        ids = [v.id for v in self.variants]
        if len(set(ids)) != len(ids):
            raise ValueError("variant ids must be unique")
        if not any(v == replace(BASELINE, id=v.id, description=v.description)
                   for v in self.variants):
            raise ValueError("the grid must include the baseline variant")
        if not self.tracked:
            school = [t.label for t in _school_terms(self.columns, self.table_column, 0)]
            college = ["college_visits"] if self.columns.college else []
            object.__setattr__(self, "tracked", tuple(school + college))
        object.__setattr__(self, "tracked", tuple(self.tracked))

    def spec(self, variant: Variant) -> RegressionSpec:
        build = build_case_spec if self.kind == "case" else build_death_spec
        return build(variant, table_column=self.table_column, columns=self.columns,
                     jackknife=self.jackknife, rng_seed=self.rng_seed)


@dataclass(frozen=True)
class GridRow:
    variant: str
    description: str
    estimator: str
    term: str
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    p_value: float
    nobs: int
    status: str = "ok"
    error: str = ""

    FIELDS = ("variant", "description", "estimator", "term", "estimate", "se", "ci_lo",
              "ci_hi", "p_value", "nobs", "status", "error")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def _run_one(task):
    dataset, spec, variant, estimator, tracked, level = task
    try:
        res = fit(dataset, spec.with_estimator(estimator))
    except DynPanelError as exc:
        msg = f"{type(exc).__name__}: {exc}"
        return [GridRow(variant.id, variant.description, estimator, t, math.nan, math.nan,
                        math.nan, math.nan, math.nan, 0, "failed", msg) for t in tracked]
    ci = res.conf_int(level)
    rows = []
    for t in tracked:
        if t not in res.term_names:
            rows.append(GridRow(variant.id, variant.description, estimator, t, math.nan,
                                math.nan, math.nan, math.nan, math.nan, res.nobs, "absent"))
            continue
        k = res.term_names.index(t)
        rows.append(GridRow(variant.id, variant.description, estimator, t,
                            float(res.coefficients[k]), float(res.se[k]), float(ci[k, 0]),
                            float(ci[k, 1]), float(res.p_value[k]), res.nobs))
    return rows


def run_grid(dataset: PanelDataset, grid: SensitivityGrid, *,
             estimators=("fe", "bc"), level: float = 0.90, jobs: int = 1) -> list[GridRow]:
    """Fit every variant with every estimator; one row per (variant, estimator, term).

    A variant that fails (missing column, rank deficiency, ...) yields rows
    marked ``failed`` and the grid carries on.  Rows follow the declared
    variant order regardless of ``jobs``.
    """
    tasks = []
    for v in grid.variants:
        spec = grid.spec(v)
        for est in estimators:
            tasks.append((dataset, spec, v, est, grid.tracked, level))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_one, tasks))
    else:
        chunks = [_run_one(t) for t in tasks]
    return [row for chunk in chunks for row in chunk]


# -- tables -------------------------------------------------------------------------

def stars(p: float) -> str:
    """``***`` for p < 0.01, ``**`` for p < 0.05, ``*`` for p < 0.1."""
    if p is None or not np.isfinite(p):
        return ""
    return "*" * sum(p < a for a in STAR_LEVELS)


def format_table(results, terms=None, *, digits: int = 3) -> str:
    """Plain-text coefficient table, one column per fit.

    ``results`` maps a column title to a :class:`FitResult`.  Standard errors
    appear in parentheses beneath each estimate.
    """
    results = dict(results)
    if terms is None:
        terms = []
        for r in results.values():
            terms += [t for t in r.term_names if t not in terms]
    titles = list(results)
    body = []
    for t in terms:
        est, se = [t], [""]
        for r in results.values():
            if t in r.term_names:
                k = r.term_names.index(t)
                est.append(f"{r.coefficients[k]:.{digits}f}{stars(r.p_value[k])}")
                se.append(f"({r.se[k]:.{digits}f})")
            else:
                est += [""]
                se += [""]
        body += [est, se]
    body.append(["Observations"] + [f"{r.nobs:,}" for r in results.values()])
    body.append(["R2 (within)"] + [f"{r.r_squared:.{digits}f}" for r in results.values()])
    body.append(["Estimator"] + [r.estimator for r in results.values()])
    header = [""] + titles
    widths = [max(len(row[j]) for row in body + [header]) for j in range(len(header))]

    def line(row):
        return "  ".join(c.ljust(widths[0]) if j == 0 else c.rjust(widths[j])
                         for j, c in enumerate(row)).rstrip()

    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = [line(header), rule] + [line(r) for r in body[:-3]] + [rule] + [line(r) for r in body[-3:]]
    out.append("* p<0.1; ** p<0.05; *** p<0.01")
    return "\n".join(out)
