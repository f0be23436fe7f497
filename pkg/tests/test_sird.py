import json
import warnings

import numpy as np
import pytest

from dynpanel.errors import EpidemicDiesOut, NegativeState, StepTooLarge
from dynpanel.fe import build_design
from dynpanel.pipeline import Columns, build_case_spec
from dynpanel.sird import (
    Degenerate,
    SirdParams,
    SynthPanelConfig,
    case_growth_identity_check,
    death_growth_identity_check,
    generate_synth_panel,
    integrate,
)

N = 1e6
INIT = (N - 100, 100, 0, 0, 0)


def test_no_transmission_decays_exponentially():
    gamma = 0.2
    p = SirdParams(N, 0.0, gamma, 0.02)
    traj = integrate(p, INIT, 5 / gamma, 0.05)
    assert np.all(traj.S == traj.S[0])
    assert traj.I[-1] == pytest.approx(100 * np.exp(-5), rel=1e-6)


def test_kappa_zero_means_no_deaths():
    traj = integrate(SirdParams(N, 0.3, 0.1, 0.0), INIT, 60, 0.1)
    assert np.all(traj.D == 0)
    assert death_growth_identity_check(traj, SirdParams(N, 0.3, 0.1, 0.0)) is Degenerate.NO_DEATHS


def test_fourth_order_convergence():
    p = SirdParams(N, 0.35, 0.1, 0.01, 0.3)
    final = [integrate(p, INIT, 60.0, dt).I[-1] for dt in (0.5, 0.25, 0.125)]
    ratio = (final[0] - final[1]) / (final[1] - final[2])
    assert 12 <= ratio <= 20


def test_monotone_paths_and_recovery_split():
    kappa = 0.03
    p = SirdParams(N, 0.4, 0.1, kappa, 0.2)
    traj = integrate(p, INIT, 400.0, 0.1)
    slack = 1e-12 * N
    assert (np.diff(traj.S) <= slack).all()
    assert (np.diff(traj.C) >= 0).all() and (np.diff(traj.D) >= 0).all()
    share = traj.R[-1] / (traj.R[-1] + traj.D[-1])
    assert share == pytest.approx(1 - kappa, abs=1e-6)


def test_constant_tau_death_growth_equals_case_growth():
    p = SirdParams(N, 0.3, 0.1, 0.01, 0.2)
    traj = integrate(p, INIT, 100.0, 0.01)
    assert death_growth_identity_check(traj, p) < 1e-4
    assert case_growth_identity_check(traj, p) < 1e-4


def test_no_infection_sentinel():
    traj = integrate(SirdParams(N, 0.3, 0.1, 0.01), (N, 0, 0, 0, 0), 10, 0.5)
    assert case_growth_identity_check(traj, SirdParams(N, 0.3, 0.1, 0.01)) is Degenerate.NO_INFECTION


def test_step_beta_identity_skips_breakpoints():
    beta = lambda t: 0.3 if t <= 30 else 0.15
    p = SirdParams(N, beta, 0.1, 0.01, 0.2, breakpoints=(30.0,))
    traj = integrate(p, INIT, 60.0, 0.01)
    assert case_growth_identity_check(traj, p) < 1e-4


def test_vectorized_units_match_single_runs():
    Ns = np.array([1e5, 5e5])
    p = SirdParams(Ns, np.array([0.3, 0.2]), 0.1, 0.01, np.array([0.1, 0.4]))
    both = integrate(p, (Ns - 50, np.full(2, 50.0), 0, 0, 0), 40.0, 0.1)
    for k in range(2):
        one = integrate(SirdParams(Ns[k], [0.3, 0.2][k], 0.1, 0.01, [0.1, 0.4][k]),
                        (Ns[k] - 50, 50, 0, 0, 0), 40.0, 0.1)
        np.testing.assert_allclose(both.C[:, k], one.C, rtol=1e-13)


def test_integrate_preconditions():
    p = SirdParams(N, 0.3, 0.1, 0.01)
    with pytest.raises(ValueError):
        integrate(p, (N, 1, 0, 0, 0), 10, 0.1)  # does not sum to N
    with pytest.raises(ValueError):
        integrate(p, INIT, 10, -0.1)
    with pytest.raises(NegativeState):
        integrate(p, (N + 5, -5, 0, 0, 0), 10, 0.1)
    with pytest.raises(ValueError):
        SirdParams(N, 0.3, 0.0, 0.01)
    with pytest.raises(ValueError):
        SirdParams(N, 0.3, 0.1, 1.5)


def test_explosive_step_breaks_conservation():
    # RK4 keeps S+I+R+D exactly up to roundoff; a wildly large step swamps it
    with pytest.raises(StepTooLarge):
        integrate(SirdParams(1e3, 1e12, 0.1, 0.01), (999.0, 1.0, 0, 0, 0), 2.0, 1.0)


def test_negative_state_from_coarse_step():
    with pytest.raises(NegativeState):
        integrate(SirdParams(1e3, 0.0, 5.0, 0.01), (900.0, 100.0, 0, 0, 0), 2.0, 1.0)


def test_weekly_series_differences_days():
    traj = integrate(SirdParams(N, 0.3, 0.1, 0.01, 0.2), INIT, 30.0, 0.05)
    daily = traj.at_days()
    assert daily.t.size == 31
    wk = traj.weekly("C")
    np.testing.assert_allclose(wk[7:], daily.C[7:] - daily.C[:-7])


# -- synthetic panels ------------------------------------------------------------

SMALL = SynthPanelConfig(n_units=40, n_states=8, days=90)


def test_synth_panel_shape_and_truth():
    ds, truth = generate_synth_panel(SMALL, seed=1)
    assert ds.n_units == 40 and ds.n_dates == 90
    assert {"cases", "deaths", "tests", "population", "policy"} <= set(ds.series)
    assert truth.theta == {"policy": 0.05}
    assert set(ds.cluster_map.values()) == set(ds.attr("state"))
    cases = ds.column("cases")
    assert (cases >= 0).all() and np.array_equal(cases, np.round(cases))
    json.dumps(truth.to_dict())


def test_synth_determinism():
    a, _ = generate_synth_panel(SMALL, seed=3)
    b, _ = generate_synth_panel(SMALL, seed=3)
    for k in a.series:
        assert np.array_equal(a.column(k), b.column(k))


def test_exchangeable_without_shocks():
    cfg = SynthPanelConfig(n_units=6, n_states=2, days=60, policies={"policy": 0.0},
                           unit_sd=0, state_week_sd=0, noise_sd=0, population=(1e6, 1e6),
                           initial_infected=(3e-4, 3e-4), tau_base=(0.05, 0.05),
                           tau_gain=(0, 0), obs_noise="none")
    ds, _ = generate_synth_panel(cfg, seed=0)
    cases = ds.wide("cases")
    assert (cases == cases[0]).all()


def test_generated_trajectory_conserves():
    cfg = SynthPanelConfig(n_units=5, n_states=1, days=60)
    _, _, traj = generate_synth_panel(cfg, seed=2, return_trajectory=True)
    # daily records from 24 model days before the first calendar day
    assert traj.S.shape == (60 + 24 + 1, 5)
    assert np.max(np.abs(traj.total - traj.total[0]) / traj.total[0]) <= 1e-9


def test_dies_out_warning():
    cfg = SynthPanelConfig(n_units=10, n_states=2, days=200, growth0=-1.5, obs_noise="none")
    with pytest.warns(EpidemicDiesOut):
        generate_synth_panel(cfg, seed=0)


def test_synth_panel_feeds_case_spec():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds, _ = generate_synth_panel(SMALL, seed=4)
    spec = build_case_spec(columns=Columns(k12="policy", college=None, npis=()))
    d = build_design(ds, spec)
    assert d.nobs > 0 and d.X.shape[1] == 5


def test_config_validation_and_from_dict():
    with pytest.raises(ValueError):
        SynthPanelConfig(noise_sd=-1)
    with pytest.raises(ValueError):
        SynthPanelConfig(link="probit")
    cfg = SynthPanelConfig.from_dict({"episode_length": [21, 56], "covariates": ["a"]})
    assert cfg.episode_length == (21, 56) and cfg.covariates == ("a",)
