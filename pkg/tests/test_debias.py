import numpy as np
import pytest

from dynpanel.debias import (
    CrossoverPartition,
    build_crossover_subpanel,
    fit,
    fit_debiased,
    fit_debiased_cbc,
    half_masks,
    partition_units,
)
from dynpanel.errors import NoSecondHalf, TooFewUnits
from dynpanel.fe import RegressionSpec, Term, build_design, fit_fe
from dynpanel.panel import PanelDataset

from helpers import AR1_SPEC, START, STATIC_SPEC, ar1_panel, static_panel, unit_ids


def test_partition_sizes_and_determinism():
    a = partition_units(["u1", "u2", "u3", "u4"], 1, seed=3)
    assert a == partition_units(["u4", "u3", "u2", "u1"], 1, seed=3)
    assert (len(a[0].n1), len(a[0].n2)) == (2, 2)
    odd = partition_units(list("abcde"), 1, seed=0)[0]
    assert {len(odd.n1), len(odd.n2)} == {2, 3}
    assert set(odd.n1) | set(odd.n2) == set("abcde")


def test_partitions_are_independent_draws():
    parts = partition_units([f"u{i:02d}" for i in range(40)], 2, seed=1)
    assert len(parts) == 2 and parts[0].n1 != parts[1].n1
    assert [p.j for p in parts] == [0, 1]


def test_partition_errors():
    with pytest.raises(TooFewUnits):
        partition_units(["a"], 1, 0)
    with pytest.raises(ValueError):
        CrossoverPartition(0, ("a", "b"), ("b",))
    with pytest.raises(ValueError):
        CrossoverPartition(0, ("a", "b", "c"), ("d",))


def _toy(n_units, n_days):
    x = np.arange(n_units * n_days, dtype=float)
    return PanelDataset(unit_ids(n_units), START + np.arange(n_days),
                        {"y": np.sin(x), "x": np.cos(x)})


TOY_SPEC = RegressionSpec(Term("y"), (Term("x"),), ("unit",))


def test_level_table_four_units_ten_days():
    ds = _toy(4, 10)
    d = build_design(ds, TOY_SPEC)
    part = partition_units(ds.unit_ids, 1, 0)[0]
    cross = build_crossover_subpanel(part, d)
    assert not cross.degenerate
    codes = cross.design.factor_codes[0]
    assert codes.max() + 1 == 8
    first, _, T = half_masks(d)
    assert T == 10 and first.sum() == 4 * 5
    # levels: (unit, first half) for days 1-5 and (unit, second half) for days 6-10
    for u in range(4):
        rows = cross.design.unit_codes == u
        t = cross.design.time_codes[rows]
        lv = codes[rows]
        assert len(set(lv[t < 5])) == 1 and len(set(lv[t >= 5])) == 1
        assert lv[t < 5][0] != lv[t >= 5][0]


def test_odd_window_duplicates_middle_day():
    d = build_design(_toy(3, 9), TOY_SPEC)
    cross = build_crossover_subpanel(partition_units(unit_ids(3), 1, 0)[0], d)
    assert cross.design.nobs == d.nobs + 3


def test_single_period_is_degenerate():
    ds = _toy(4, 1)
    d = build_design(ds, TOY_SPEC)
    cross = build_crossover_subpanel(partition_units(ds.unit_ids, 1, 0)[0], d)
    assert cross.degenerate and cross.design is d
    with pytest.raises(NoSecondHalf):
        fit_debiased(ds, TOY_SPEC)


def test_level_count_between_n_and_2n_with_unbalanced_unit():
    ds = _toy(6, 20)
    y = ds.wide("y")
    y[0, 10:] = np.nan  # first unit observed only in the first half
    ds = ds.with_series(y=y)
    d = build_design(ds, TOY_SPEC)
    cross = build_crossover_subpanel(partition_units(ds.unit_ids, 1, 0)[0], d)
    n_levels = cross.design.factor_codes[0].max() + 1
    assert 6 <= n_levels <= 12 and n_levels == 11


def test_bc_is_affine_combination():
    ds = ar1_panel(60, 15, seed=1)
    res = fit_debiased(ds, AR1_SPEC, J=3, seed=9)
    rebuilt = 2 * res.details["full_coef"] - res.details["crossover_coefs"].mean(axis=0)
    np.testing.assert_allclose(res.coefficients, rebuilt, atol=1e-14, rtol=0)
    np.testing.assert_array_equal(res.vcov, fit_fe(ds, AR1_SPEC).vcov)
    assert res.estimator == "bc" and res.details["jackknife"] == 3 and res.details["seed"] == 9


def test_seed_determinism_bit_for_bit():
    ds = ar1_panel(50, 12, seed=2)
    for f in (fit_debiased, fit_debiased_cbc):
        a, b = f(ds, AR1_SPEC, seed=4), f(ds, AR1_SPEC, seed=4)
        assert np.array_equal(a.coefficients, b.coefficients)


def test_noiseless_static_cbc_equals_fe():
    ds = static_panel(40, 12, noise=0.0, seed=3)
    plain = fit_fe(ds, STATIC_SPEC).coefficients
    np.testing.assert_allclose(fit_debiased_cbc(ds, STATIC_SPEC).coefficients, plain, atol=1e-12)
    np.testing.assert_allclose(fit_debiased(ds, STATIC_SPEC).coefficients, plain, atol=1e-12)


def test_j2_vs_j5_within_one_se():
    ds = ar1_panel(300, 20, seed=5)
    a = fit_debiased(ds, AR1_SPEC, J=2, seed=1)
    b = fit_debiased(ds, AR1_SPEC, J=5, seed=1)
    assert abs(a.coefficients[0] - b.coefficients[0]) < a.se[0]


def test_dispatch_on_estimator():
    ds = ar1_panel(40, 12, seed=6)
    for est in ("fe", "bc", "cbc"):
        assert fit(ds, AR1_SPEC.with_estimator(est)).estimator == est


@pytest.mark.slow
def test_static_dgp_correction_centered_at_zero():
    diffs = []
    for r in range(500):
        ds = static_panel(60, 10, seed=1000 + r)
        res = fit_debiased(ds, STATIC_SPEC, seed=r)
        diffs.append(res.coefficients[0] - res.details["full_coef"][0])
    diffs = np.array(diffs)
    assert abs(diffs.mean()) < 3 * diffs.std(ddof=1) / np.sqrt(diffs.size)


@pytest.mark.slow
def test_cbc_reduces_nickell_bias():
    fe, cbc = [], []
    for r in range(100):
        ds = ar1_panel(300, 20, seed=r)
        res = fit_debiased_cbc(ds, AR1_SPEC, seed=r)
        fe.append(res.details["full_coef"][0])
        cbc.append(res.coefficients[0])
    assert abs(np.mean(cbc) - 0.5) < 0.5 * abs(np.mean(fe) - 0.5)
