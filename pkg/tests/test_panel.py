import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynpanel.errors import (
    AllSharesZero,
    DataError,
    DuplicateRow,
    InconsistentAttribute,
    MissingColumn,
    NegativeCount,
    NonNumericValue,
    UnparseableDate,
    ZeroEnrollmentCounty,
)
from dynpanel.panel import (
    DistrictRecord,
    PanelDataset,
    Schema,
    aggregate_districts,
    carry_forward_after,
    classify_dominant_mode,
    lag,
    load_csv,
    load_districts,
    log_diff,
    log_weekly,
    moving_average,
    rolling_sum,
)

from helpers import START, two_factor_panel

finite = st.floats(-1e3, 1e3, allow_nan=False)


def write(path, text):
    path.write_text(text)
    return path


# -- loading -------------------------------------------------------------------

def test_load_fills_missing_rows_with_nan(tmp_path):
    p = write(tmp_path / "p.csv",
              "unit,date,cases\na,2020-01-01,1\na,2020-01-03,3\nb,2020-01-02,5\n")
    ds = load_csv(p)
    assert ds.unit_ids == ("a", "b")
    assert ds.n_dates == 3
    np.testing.assert_array_equal(ds.wide("cases"), [[1, np.nan, 3], [np.nan, 5, np.nan]])
    assert ds.n_missing("cases") == 3


def test_duplicate_row_names_unit_and_date(tmp_path):
    p = write(tmp_path / "p.csv", "unit,date,x\na,2020-01-01,1\na,2020-01-01,2\n")
    with pytest.raises(DuplicateRow) as exc:
        load_csv(p)
    assert "a" in str(exc.value) and "2020-01-01" in str(exc.value)
    assert "line 3" in str(exc.value)


@pytest.mark.parametrize("body, error", [
    ("a,01/02/2020,1\n", UnparseableDate),
    ("a,2020-01-01,abc\n", NonNumericValue),
])
def test_bad_cells(tmp_path, body, error):
    p = write(tmp_path / "p.csv", "unit,date,x\n" + body)
    with pytest.raises(error):
        load_csv(p)


def test_missing_column_and_inconsistent_attribute(tmp_path):
    p = write(tmp_path / "p.csv", "unit,day,x\na,2020-01-01,1\n")
    with pytest.raises(MissingColumn):
        load_csv(p)
    p = write(tmp_path / "q.csv", "unit,date,state,x\na,2020-01-01,NY,1\na,2020-01-02,NJ,2\n")
    with pytest.raises(InconsistentAttribute):
        load_csv(p, Schema(attrs=("state",)))


def test_empty_cell_is_missing(tmp_path):
    p = write(tmp_path / "p.csv", "unit,date,x,y\na,2020-01-01,,2\n")
    ds = load_csv(p)
    assert math.isnan(ds.column("x")[0]) and ds.column("y")[0] == 2


def test_round_trip(tmp_path):
    ds = two_factor_panel(5, 9, seed=2)
    ds = ds.with_series(x1=np.where(np.arange(45) % 7 == 0, np.nan, ds.column("x1")))
    schema = ds.to_csv(tmp_path / "out.csv")
    back = load_csv(tmp_path / "out.csv", schema)
    assert back.unit_ids == ds.unit_ids
    np.testing.assert_array_equal(back.dates, ds.dates)
    assert back.unit_attrs == ds.unit_attrs
    assert back.cluster_map == ds.cluster_map
    for name in ds.series:
        np.testing.assert_array_equal(back.column(name), ds.column(name))


def test_dataset_validates_shapes():
    with pytest.raises(DataError):
        PanelDataset(("a", "b"), START + np.arange(3), {"x": np.zeros(5)})
    with pytest.raises(DataError):
        PanelDataset(("a", "a"), START + np.arange(3), {"x": np.zeros(6)})


# -- transforms ------------------------------------------------------------------

def test_moving_average_examples():
    np.testing.assert_allclose(moving_average(np.full(10, 3.0), 7)[6:], 3.0)
    assert moving_average(np.arange(1.0, 8.0), 7)[6] == 4.0
    assert np.isnan(moving_average(np.arange(1.0, 8.0), 7)[:6]).all()


def test_moving_average_brute_force():
    x = np.random.default_rng(0).normal(size=(3, 25))
    out = moving_average(x, 3)
    for t in range(2, 25):
        np.testing.assert_allclose(out[:, t], (x[:, t] + x[:, t - 1] + x[:, t - 2]) / 3,
                                   rtol=1e-13)


def test_window_propagates_missing():
    x = np.arange(10.0)
    x[4] = np.nan
    out = rolling_sum(x, 3)
    assert np.isnan(out[4:7]).all() and out[3] == 6.0 and out[7] == 18.0


@given(arrays(float, 20, elements=finite), arrays(float, 20, elements=finite),
       st.floats(-5, 5), st.integers(1, 7))
def test_moving_average_linear(x, y, a, w):
    np.testing.assert_allclose(moving_average(a * x + y, w),
                               a * moving_average(x, w) + moving_average(y, w), atol=1e-8)


@given(arrays(float, 30, elements=finite), st.integers(1, 5), st.integers(1, 10))
def test_moving_average_translation_equivariant(x, w, s):
    shifted = moving_average(lag(x, s), w)
    np.testing.assert_allclose(shifted[s + w - 1:], moving_average(x, w)[w - 1:30 - s],
                               atol=1e-9)


def test_log_weekly_rules():
    out = log_weekly(np.array([0.0, 1.0, math.e ** 2, np.nan]))
    assert out[0] == -1 and out[1] == 0
    assert abs(out[2] - 2) < 1e-12 and np.isnan(out[3])
    assert log_weekly(np.array([0.0]), zero_value=0.0)[0] == 0.0
    with pytest.raises(NegativeCount):
        log_weekly(np.array([1.0, -1.0]))


def test_log_diff_examples():
    x = log_weekly(np.array([10.0] + [0] * 6 + [20.0]))
    assert abs(log_diff(x, 7)[7] - math.log(2)) < 1e-12
    x = log_weekly(np.array([0.0] * 7 + [5.0]))
    assert abs(log_diff(x, 7)[7] - (math.log(5) + 1)) < 1e-12
    np.testing.assert_array_equal(log_diff(np.full(10, 1.5), 7)[7:], 0)


@given(arrays(float, 40, elements=finite), st.integers(1, 4))
def test_log_diff_telescopes(x, K):
    t = 39
    total = sum(log_diff(x, 7)[t - 7 * k] for k in range(K))
    assert abs(total - (x[t] - x[t - 7 * K])) < 1e-8


def test_lag_examples():
    ramp = np.arange(50.0)
    np.testing.assert_array_equal(lag(ramp, 0), ramp)
    np.testing.assert_array_equal(lag(ramp, 14)[14:], ramp[:-14])
    assert np.isnan(lag(ramp, 14)[:14]).all()
    x = np.random.default_rng(1).normal(size=(4, 60))
    np.testing.assert_array_equal(lag(x, 35)[:, 35:], x[:, :25])
    with pytest.raises(ValueError):
        lag(ramp, -1)


def test_carry_forward_after():
    dates = START + np.arange(6)
    x = np.array([1.0, 2, np.nan, 4, 5, 6])
    out = carry_forward_after(x, dates, str(dates[2]))
    np.testing.assert_array_equal(out, [1, 2, np.nan, 2, 2, 2])


# -- districts ---------------------------------------------------------------------

CAL = START + np.arange(30)


def rec(d, county, enr, day, mode="inperson", mask="yes"):
    return DistrictRecord(d, county, enr, None if day is None else CAL[day], mode, mask)


def test_single_district_steps_open():
    agg = aggregate_districts([rec("d1", "c1", 100, 12)], CAL)
    s = agg.shares["inperson"][0]
    assert (s[:12] == 0).all() and (s[12:] == 1).all()
    assert agg.open_day["inperson"][0] == 12


def test_weighted_open_date():
    agg = aggregate_districts([rec("d1", "c", 100, 10, "hybrid"),
                               rec("d2", "c", 300, 20, "hybrid")], CAL)
    assert agg.open_day["hybrid"][0] == 17.5


def test_unknown_majority_flags_county():
    agg = aggregate_districts([rec("d1", "c", 60, None, "unknown", "unknown"),
                               rec("d2", "c", 40, 5, "remote", "no")], CAL)
    assert agg.drop_mode[0] and agg.drop_mask[0]
    assert agg.no_mask[0] == 1


def test_shares_bounded_and_monotone():
    rng = np.random.default_rng(4)
    modes = ["inperson", "hybrid", "remote", "unknown"]
    recs = [rec(f"d{k}", f"c{k % 3}", rng.uniform(10, 100),
                int(rng.integers(0, 30)) if rng.random() < 0.8 else None, modes[k % 4])
            for k in range(24)]
    agg = aggregate_districts(recs, CAL)
    total = sum(agg.shares[m] for m in agg.shares)
    assert (total <= 1 + 1e-12).all()
    for m in agg.shares:
        assert (np.diff(agg.shares[m], axis=1) >= 0).all()


def test_zero_enrollment_county():
    with pytest.raises(ZeroEnrollmentCounty):
        aggregate_districts([rec("d1", "c", 0, 3)], CAL)


def test_load_districts_and_merge(tmp_path):
    p = write(tmp_path / "d.csv",
              "district,county,enrollment,open_date,mode,staff_mask\n"
              f"d1,a,100,{CAL[5]},inperson,no\n"
              f"d2,a,50,{CAL[9]},hybrid,yes\n"
              "d3,b,80,,remote,unknown\n")
    recs = load_districts(p)
    assert len(recs) == 3 and recs[2].opening_date is None
    panel = PanelDataset(("a", "b", "c"), CAL, {"x": np.zeros(90)})
    merged = aggregate_districts(recs, CAL).merge_into(panel)
    assert merged.attr("mode") == ("inperson", "remote", None)
    assert merged.attr("open_date")[0] == str(CAL[5])
    assert merged.wide("no_mask")[0, 0] == 1
    assert np.isnan(merged.wide("inperson_share")[2]).all()


def test_classify_examples_and_ties():
    assert classify_dominant_mode((0.6, 0.3, 0.1)) == "inperson"
    assert classify_dominant_mode((0.4, 0.4, 0.2)) == "inperson"
    assert classify_dominant_mode((0, 0, 1)) == "remote"
    # every ordering of a two-way tie resolves by priority
    for a, b, c in set(permutations((0.4, 0.4, 0.2))):
        expected = "inperson" if a == 0.4 else "hybrid"
        assert classify_dominant_mode({"inperson": a, "hybrid": b, "remote": c}) == expected
    with pytest.raises(AllSharesZero):
        classify_dominant_mode((0, 0, 0))


# shares on a 1/1000 grid: rescaling cannot underflow or merge distinct values
@settings(max_examples=50)
@given(arrays(int, 3, elements=st.integers(0, 1000)), st.floats(0.01, 100))
def test_classify_scale_invariant(counts, c):
    if counts.max() == 0:
        return
    shares = counts / 1000
    assert classify_dominant_mode(shares * c) == classify_dominant_mode(shares)
