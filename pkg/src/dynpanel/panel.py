"""Long-format county-by-day panels and the series transforms built on them.

A :class:`PanelDataset` always stores the full rectangle ``unit x date`` over
one contiguous daily calendar.  Rows missing from the input file are present
with every series set to NaN, so lags and windows can be taken by plain array
shifts along the time axis.  NaN is the only missing-value marker and every
transform propagates it.
"""
from __future__ import annotations

import csv
import datetime as _dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    AllSharesZero,
    DataError,
    DuplicateRow,
    InconsistentAttribute,
    InvalidRecord,
    MissingColumn,
    NegativeCount,
    NonNumericValue,
    UnparseableDate,
    ZeroEnrollmentCounty,
)

__all__ = [
    "Schema",
    "PanelDataset",
    "load_csv",
    "moving_average",
    "rolling_sum",
    "log_weekly",
    "log_diff",
    "lag",
    "carry_forward_after",
    "DistrictRecord",
    "DistrictAggregate",
    "load_districts",
    "aggregate_districts",
    "classify_dominant_mode",
    "MODES",
]

MODES = ("inperson", "hybrid", "remote")
_MODE_VALUES = MODES + ("unknown",)
_MASK_VALUES = ("yes", "no", "unknown")


def _parse_date(value, line=None, column="date"):
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[D]")
    if isinstance(value, _dt.date):
        return np.datetime64(value, "D")
    try:
        return np.datetime64(_dt.date.fromisoformat(str(value).strip()), "D")
    except ValueError:
        raise UnparseableDate(value, line, column) from None


def _parse_float(value, line=None, column=None):
    value = value.strip()
    if value == "":
        return math.nan
    try:
        return float(value)
    except ValueError:
        raise NonNumericValue(value, line, column) from None


@dataclass(frozen=True)
class Schema:
    """Column roles of a long-format CSV.

    ``values=None`` means every column that is not the unit, the date or an
    attribute is read as a numeric series.  Attribute columns must be constant
    within a unit; ``cluster`` names the attribute used as the cluster map
    (each unit is its own cluster when omitted).
    """

    unit: str = "unit"
    date: str = "date"
    values: tuple[str, ...] | None = None
    attrs: tuple[str, ...] = ()
    cluster: str | None = None


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced ``unit x date`` container with NaN marking missing values.

    Every series is a flat float array of length ``n_units * n_dates`` laid out
    unit-major (all dates of the first unit, then the second unit, ...).
    """

    unit_ids: tuple[str, ...]
    dates: np.ndarray
    series: Mapping[str, np.ndarray]
    unit_attrs: Mapping[str, tuple] = field(default_factory=dict)
    cluster_map: Mapping[str, str] | None = None

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "unit_ids", tuple(str(u) for u in self.unit_ids))
        if len(set(self.unit_ids)) != len(self.unit_ids):
            raise DataError("unit ids must be unique")
        if dates.size > 1 and np.any(np.diff(dates).astype(int) != 1):
            raise DataError("dates must be contiguous and strictly increasing by one day")
        n = self.n_rows
        series = {}
        for name, values in self.series.items():
            arr = np.asarray(values, dtype=float).reshape(-1)
            if arr.size != n:
                raise DataError(f"series {name!r} has {arr.size} rows, expected {n}")
            arr = arr.copy()
            arr.flags.writeable = False
            series[name] = arr
        object.__setattr__(self, "series", series)
        attrs = {}
        for name, values in self.unit_attrs.items():
            values = tuple(values)
            if len(values) != self.n_units:
                raise DataError(f"unit attribute {name!r} has {len(values)} entries, "
                                f"expected {self.n_units}")
            attrs[name] = values
        object.__setattr__(self, "unit_attrs", attrs)
        cmap = self.cluster_map
        if cmap is None:
            cmap = {u: u for u in self.unit_ids}
        cmap = {str(k): str(v) for k, v in cmap.items()}
        missing = [u for u in self.unit_ids if u not in cmap]
        if missing:
            raise DataError(f"units missing from cluster map: {missing[:5]}")
        object.__setattr__(self, "cluster_map", cmap)

    # -- shape ------------------------------------------------------------

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_dates(self) -> int:
        return int(self.dates.size)

    @property
    def n_rows(self) -> int:
        return self.n_units * self.n_dates

    @property
    def unit_index(self) -> np.ndarray:
        """Unit position of every row."""
        return np.repeat(np.arange(self.n_units), self.n_dates)

    @property
    def time_index(self) -> np.ndarray:
        """Calendar position (0-based day) of every row."""
        return np.tile(np.arange(self.n_dates), self.n_units)

    @property
    def week_index(self) -> np.ndarray:
        """Week of every row, counted in 7-day blocks from the first date."""
        return self.time_index // 7

    def n_missing(self, name: str | None = None) -> int:
        names = [name] if name is not None else list(self.series)
        return int(sum(np.isnan(self.series[n]).sum() for n in names))

    # -- access -----------------------------------------------------------

    def __contains__(self, name):
        return name in self.series

    def column(self, name: str) -> np.ndarray:
        try:
            return self.series[name]
        except KeyError:
            raise MissingColumn(name, "dataset") from None

    def wide(self, name: str) -> np.ndarray:
        """Series as an ``(n_units, n_dates)`` array (copy)."""
        return self.column(name).reshape(self.n_units, self.n_dates).copy()

    def attr(self, name: str) -> tuple:
        if name == "unit":
            return self.unit_ids
        try:
            return self.unit_attrs[name]
        except KeyError:
            raise MissingColumn(name, "unit attributes") from None

    def clusters(self) -> tuple:
        return tuple(self.cluster_map[u] for u in self.unit_ids)

    def date_position(self, date) -> int:
        """Calendar position of ``date``; may fall outside ``[0, n_dates)``."""
        return int((_parse_date(date) - self.dates[0]).astype(int))

    # -- functional updates ---------------------------------------------

    def with_series(self, **named) -> "PanelDataset":
        series = dict(self.series)
        for name, values in named.items():
            series[name] = np.asarray(values, dtype=float).reshape(-1)
        return PanelDataset(self.unit_ids, self.dates, series, self.unit_attrs, self.cluster_map)

    def with_attrs(self, **named) -> "PanelDataset":
        attrs = dict(self.unit_attrs)
        attrs.update({k: tuple(v) for k, v in named.items()})
        return PanelDataset(self.unit_ids, self.dates, self.series, attrs, self.cluster_map)

    def with_clusters(self, attr: str) -> "PanelDataset":
        values = self.attr(attr)
        cmap = dict(zip(self.unit_ids, (str(v) for v in values)))
        return PanelDataset(self.unit_ids, self.dates, self.series, self.unit_attrs, cmap)

    def select_units(self, keep: Iterable[str]) -> "PanelDataset":
        keep = set(str(u) for u in keep)
        idx = [i for i, u in enumerate(self.unit_ids) if u in keep]
        rows = (np.asarray(idx)[:, None] * self.n_dates + np.arange(self.n_dates)).ravel()
        series = {k: v[rows] for k, v in self.series.items()}
        attrs = {k: tuple(v[i] for i in idx) for k, v in self.unit_attrs.items()}
        units = tuple(self.unit_ids[i] for i in idx)
        cmap = {u: self.cluster_map[u] for u in units}
        return PanelDataset(units, self.dates, series, attrs, cmap)

    # -- serialization ----------------------------------------------------

    def to_frame(self):
        import pandas as pd

        frame = pd.DataFrame({
            "unit": np.repeat(np.asarray(self.unit_ids, dtype=object), self.n_dates),
            "date": np.tile(self.dates, self.n_units),
        })
        for name, values in self.unit_attrs.items():
            frame[name] = np.repeat(np.asarray(values, dtype=object), self.n_dates)
        for name, values in self.series.items():
            frame[name] = values
        return frame

    def to_csv(self, path, *, cluster_attr: str | None = None, float_format: str = "{!r}"):
        """Write the long-format CSV that :func:`load_csv` reads back.

        Attributes are repeated on every row.  Missing values are empty cells.
        """
        path = Path(path)
        attr_names = list(self.unit_attrs)
        clusters = self.clusters()
        if cluster_attr is None and clusters != self.unit_ids:
            cluster_attr = next(
                (a for a in attr_names
                 if tuple(str(v) for v in self.unit_attrs[a]) == clusters),
                "_cluster")
        header = ["unit", "date", *attr_names]
        if cluster_attr == "_cluster":
            header.append("_cluster")
        names = list(self.series)
        header += names
        dates = [str(d) for d in self.dates]
        cols = [self.series[n] for n in names]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            row = 0
            for i, unit in enumerate(self.unit_ids):
                head_attrs = ["" if self.unit_attrs[a][i] is None else str(self.unit_attrs[a][i])
                              for a in attr_names]
                if cluster_attr == "_cluster":
                    head_attrs.append(self.cluster_map[unit])
                for d in dates:
                    vals = ["" if math.isnan(c[row]) else float_format.format(float(c[row]))
                            for c in cols]
                    w.writerow([unit, d, *head_attrs, *vals])
                    row += 1
        return Schema(values=tuple(names), attrs=tuple(attr_names), cluster=cluster_attr)


def load_csv(path, schema: Schema | None = None) -> PanelDataset:
    """Read and validate a long-format panel CSV.

    Raises
    ------
    MissingColumn, DuplicateRow, UnparseableDate, NonNumericValue
        With the offending line (1-based, header is line 1) and column.
    """
    schema = schema or Schema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(schema.unit, str(path)) from None
        for col in (schema.unit, schema.date, *schema.attrs):
            if col not in header:
                raise MissingColumn(col, str(path))
        if schema.cluster is not None and schema.cluster not in header:
            raise MissingColumn(schema.cluster, str(path))
        fixed = {schema.unit, schema.date, *schema.attrs}
        if schema.cluster is not None:
            fixed.add(schema.cluster)
        values = schema.values
        if values is None:
            values = tuple(h for h in header if h not in fixed)
        for col in values:
            if col not in header:
                raise MissingColumn(col, str(path))
        if not values:
            raise MissingColumn("<value column>", str(path))
        attr_cols = list(schema.attrs)
        if schema.cluster is not None and schema.cluster not in attr_cols:
            attr_cols.append(schema.cluster)
        ui, di = header.index(schema.unit), header.index(schema.date)
        vi = [header.index(c) for c in values]
        ai = [header.index(c) for c in attr_cols]

        records = {}
        attrs: dict[str, dict[str, str | None]] = {c: {} for c in attr_cols}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            unit = row[ui].strip()
            date = _parse_date(row[di], line, schema.date)
            key = (unit, date)
            if key in records:
                raise DuplicateRow(unit, str(date), line)
            records[key] = [_parse_float(row[j], line, values[k]) for k, j in enumerate(vi)]
            for c, j in zip(attr_cols, ai):
                v = row[j].strip() or None
                prev = attrs[c].get(unit)
                if prev is None:
                    attrs[c][unit] = v
                elif v is not None and v != prev:
                    raise InconsistentAttribute(unit, c)

    if not records:
        raise DataError(f"{path}: no data rows")
    units = sorted({u for u, _ in records})
    all_dates = [d for _, d in records]
    start, stop = min(all_dates), max(all_dates)
    dates = np.arange(start, stop + np.timedelta64(1, "D"), dtype="datetime64[D]")
    T = dates.size
    upos = {u: i for i, u in enumerate(units)}
    block = np.full((len(units) * T, len(values)), np.nan)
    for (u, d), vals in records.items():
        block[upos[u] * T + int((d - start).astype(int))] = vals
    series = {name: block[:, k] for k, name in enumerate(values)}
    unit_attrs = {c: tuple(attrs[c].get(u) for u in units) for c in schema.attrs}
    cmap = None
    if schema.cluster is not None:
        cvals = attrs[schema.cluster]
        missing = [u for u in units if cvals.get(u) is None]
        if missing:
            raise DataError(f"units without a {schema.cluster!r} value: {missing[:5]}")
        cmap = {u: cvals[u] for u in units}
    return PanelDataset(tuple(units), dates, series, unit_attrs, cmap)


# -- series transforms ---------------------------------------------------------
#
# All operate along the last axis (time) of an array shaped (..., T); a 2-D
# array is one unit per row.

def _shift(x: np.ndarray, days: int) -> np.ndarray:
    out = np.full(x.shape, np.nan)
    if days == 0:
        out[...] = x
    elif days < x.shape[-1]:
        out[..., days:] = x[..., :-days]
    return out


def lag(x, days: int) -> np.ndarray:
    """``out[t] = x[t - days]`` within each unit; the first ``days`` entries are NaN."""
    if days < 0:
        raise ValueError("lag must be nonnegative")
    return _shift(np.asarray(x, dtype=float), int(days))


def _window(x, window: int, reducer) -> np.ndarray:
    if window < 1:
        raise ValueError("window must be a positive number of days")
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    if window <= x.shape[-1]:
        out[..., window - 1:] = reducer(sliding_window_view(x, window, axis=-1), axis=-1)
    return out


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over ``window`` days; NaN if any day in the window is missing."""
    return _window(x, window, np.mean)


def rolling_sum(x, window: int) -> np.ndarray:
    """Trailing sum over ``window`` days (e.g. weekly counts from daily counts)."""
    return _window(x, window, np.sum)


def log_weekly(x, zero_value: float = -1.0) -> np.ndarray:
    """Natural log of nonnegative counts, with zero counts mapped to ``zero_value``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise NegativeCount("log_weekly needs nonnegative counts")
    out = np.full(x.shape, np.nan)
    pos = x > 0
    out[pos] = np.log(x[pos])
    out[x == 0] = zero_value
    return out


def log_diff(x, span: int) -> np.ndarray:
    """``x[t] - x[t - span]`` within unit, for series already on the log scale."""
    x = np.asarray(x, dtype=float)
    return x - lag(x, span)


def carry_forward_after(x, dates, cutoff) -> np.ndarray:
    """Replace values after ``cutoff`` by the last non-missing value on or before it."""
    x = np.array(x, dtype=float)
    dates = np.asarray(dates, dtype="datetime64[D]")
    pos = int(np.searchsorted(dates, _parse_date(cutoff), side="right"))
    if pos == 0 or pos >= x.shape[-1]:
        return x
    head = x[..., :pos]
    last = np.full(x.shape[:-1], np.nan)
    for k in range(pos):
        col = head[..., k]
        last = np.where(np.isnan(col), last, col)
    x[..., pos:] = last[..., None]
    return x


# -- districts -------------------------------------------------------------------

@dataclass(frozen=True)
class DistrictRecord:
    district_id: str
    county_id: str
    enrollment: float
    opening_date: np.datetime64 | None
    teaching_mode: str
    staff_mask: str

    def __post_init__(self):
        if not self.enrollment >= 0:
            raise InvalidRecord(f"district {self.district_id}: enrollment must be >= 0")
        if self.teaching_mode not in _MODE_VALUES:
            raise InvalidRecord(f"district {self.district_id}: teaching mode "
                                f"{self.teaching_mode!r} not in {_MODE_VALUES}")
        if self.staff_mask not in _MASK_VALUES:
            raise InvalidRecord(f"district {self.district_id}: staff_mask "
                                f"{self.staff_mask!r} not in {_MASK_VALUES}")
        if self.opening_date is not None:
            object.__setattr__(self, "opening_date", _parse_date(self.opening_date))


def load_districts(path) -> list[DistrictRecord]:
    """Read ``district,county,enrollment,open_date,mode,staff_mask`` rows."""
    cols = ("district", "county", "enrollment", "open_date", "mode", "staff_mask")
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in cols:
            if reader.fieldnames is None or col not in reader.fieldnames:
                raise MissingColumn(col, str(path))
        for line, row in enumerate(reader, start=2):
            enrollment = _parse_float(row["enrollment"], line, "enrollment")
            if math.isnan(enrollment):
                raise NonNumericValue("", line, "enrollment")
            raw_date = (row["open_date"] or "").strip()
            open_date = _parse_date(raw_date, line, "open_date") if raw_date else None
            try:
                rec = DistrictRecord(row["district"].strip(), row["county"].strip(), enrollment,
                                     open_date, row["mode"].strip().lower(),
                                     row["staff_mask"].strip().lower())
            except InvalidRecord as exc:
                raise InvalidRecord(f"line {line}: {exc}") from None
            out.append(rec)
    return out


@dataclass(frozen=True, eq=False)
class DistrictAggregate:
    """County-level products of district aggregation.

    ``open_day`` holds enrollment-weighted mean opening dates as fractional
    day offsets from ``calendar[0]`` (NaN where no district of that mode has a
    date).  ``shares`` are ``(n_counties, n_dates)`` arrays of the enrollment
    share already open under each mode.
    """

    counties: tuple[str, ...]
    calendar: np.ndarray
    shares: dict[str, np.ndarray]
    open_day: dict[str, np.ndarray]
    mode_share: dict[str, np.ndarray]
    unknown_mode_share: np.ndarray
    unknown_mask_share: np.ndarray
    no_mask: np.ndarray
    drop_mode: np.ndarray
    drop_mask: np.ndarray

    def open_date(self, mode: str, county: str):
        day = self.open_day[mode][self.counties.index(county)]
        if math.isnan(day):
            return None
        return self.calendar[0] + np.timedelta64(int(round(day)), "D")

    def dominant_mode(self) -> tuple:
        out = []
        for k in range(len(self.counties)):
            shares = [self.mode_share[m][k] for m in MODES]
            out.append(classify_dominant_mode(shares) if sum(shares) > 0 else None)
        return tuple(out)

    def report_rows(self):
        for k, c in enumerate(self.counties):
            yield {
                "county": c,
                "unknown_mode_share": float(self.unknown_mode_share[k]),
                "unknown_mask_share": float(self.unknown_mask_share[k]),
                "no_mask": int(self.no_mask[k]),
                "dropped_mode": bool(self.drop_mode[k]),
                "dropped_mask": bool(self.drop_mask[k]),
                **{f"open_day_{m}": float(self.open_day[m][k]) for m in MODES},
            }

    def merge_into(self, dataset: PanelDataset) -> PanelDataset:
        """Attach shares, the no-mask dummy, dominant mode and its opening date.

        Counties flagged by the unknown-share rule get NaN in the affected
        series, so listwise deletion removes them from specifications that use
        them.  Units with no district data get NaN throughout.
        """
        if not np.array_equal(self.calendar, dataset.dates):
            raise DataError("district calendar does not match the panel calendar")
        pos = {c: k for k, c in enumerate(self.counties)}
        T = dataset.n_dates
        new = {f"{m}_share": np.full((dataset.n_units, T), np.nan) for m in MODES}
        new["no_mask"] = np.full((dataset.n_units, T), np.nan)
        dominant = self.dominant_mode()
        mode_attr, open_attr = [], []
        for i, u in enumerate(dataset.unit_ids):
            k = pos.get(u)
            if k is None:
                mode_attr.append(None)
                open_attr.append(None)
                continue
            if not self.drop_mode[k]:
                for m in MODES:
                    new[f"{m}_share"][i] = self.shares[m][k]
            if not self.drop_mask[k]:
                new["no_mask"][i] = self.no_mask[k]
            dom = None if self.drop_mode[k] else dominant[k]
            mode_attr.append(dom)
            od = self.open_date(dom, u) if dom is not None else None
            open_attr.append(None if od is None else str(od))
        out = dataset.with_series(**new)
        return out.with_attrs(mode=mode_attr, open_date=open_attr)


def aggregate_districts(records: Sequence[DistrictRecord], calendar,
                        drop_threshold: float = 0.5) -> DistrictAggregate:
    """Aggregate district records to counties with enrollment weights.

    A district contributes to its mode's open share from its opening date on.
    Weighted opening dates use enrollment weights within each mode.  A county
    is flagged for the mode (mask) analysis when more than ``drop_threshold``
    of its enrollment is in districts reporting an unknown mode (mask policy).
    The no-mask dummy is 1 when at least one district reports that staff masks
    are not required.
    """
    calendar = np.asarray(calendar, dtype="datetime64[D]")
    T = calendar.size
    counties = tuple(sorted({r.county_id for r in records}))
    pos = {c: k for k, c in enumerate(counties)}
    n = len(counties)
    total = np.zeros(n)
    for r in records:
        total[pos[r.county_id]] += r.enrollment
    for c in counties:
        if total[pos[c]] <= 0:
            raise ZeroEnrollmentCounty(c)

    open_counts = {m: np.zeros((n, T)) for m in MODES}
    date_num = {m: np.zeros(n) for m in MODES}
    date_den = {m: np.zeros(n) for m in MODES}
    mode_enr = {m: np.zeros(n) for m in MODES}
    unknown_mode = np.zeros(n)
    unknown_mask = np.zeros(n)
    no_mask = np.zeros(n, dtype=int)
    for r in records:
        k = pos[r.county_id]
        if r.staff_mask == "unknown":
            unknown_mask[k] += r.enrollment
        elif r.staff_mask == "no":
            no_mask[k] = 1
        if r.teaching_mode == "unknown":
            unknown_mode[k] += r.enrollment
            continue
        m = r.teaching_mode
        mode_enr[m][k] += r.enrollment
        if r.opening_date is None:
            continue
        day = int((r.opening_date - calendar[0]).astype(int))
        date_num[m][k] += r.enrollment * day
        date_den[m][k] += r.enrollment
        start = min(max(day, 0), T)
        open_counts[m][k, start:] += r.enrollment

    shares = {m: open_counts[m] / total[:, None] for m in MODES}
    with np.errstate(invalid="ignore", divide="ignore"):
        open_day = {m: np.where(date_den[m] > 0, date_num[m] / date_den[m], np.nan)
                    for m in MODES}
    return DistrictAggregate(
        counties=counties,
        calendar=calendar,
        shares=shares,
        open_day=open_day,
        mode_share={m: mode_enr[m] / total for m in MODES},
        unknown_mode_share=unknown_mode / total,
        unknown_mask_share=unknown_mask / total,
        no_mask=no_mask,
        drop_mode=unknown_mode / total > drop_threshold,
        drop_mask=unknown_mask / total > drop_threshold,
    )


def classify_dominant_mode(shares) -> str:
    """Mode with the largest share; ties go to in-person, then hybrid, then remote.

    ``shares`` is either a mapping keyed by mode name or a sequence ordered
    as ``MODES``.
    """
    if isinstance(shares, Mapping):
        vals = [float(shares.get(m, 0.0)) for m in MODES]
    else:
        vals = [float(s) for s in shares]
        if len(vals) != len(MODES):
            raise ValueError(f"expected {len(MODES)} shares, got {len(vals)}")
    if any(v < 0 or math.isnan(v) for v in vals):
        raise ValueError("shares must be nonnegative")
    best = max(vals)
    if best == 0:
        raise AllSharesZero("all teaching-mode shares are zero")
    # MODES is already in priority order, so the first maximum wins ties
    return MODES[vals.index(best)]
