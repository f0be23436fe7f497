"""SIRD epidemic dynamics with detection, and synthetic county panels.

The compartments evolve as::

    S' = -(S/N) beta(t) I
    I' =  (S/N) beta(t) I - gamma I
    R' =  (1 - kappa) gamma I
    D' =  kappa gamma I
    C' =  tau(t) I

where ``C`` counts confirmed cases.  Eliminating the unobserved ``I`` gives
the growth-rate identities checked by :func:`case_growth_identity_check` and
:func:`death_growth_identity_check`.

Every state may be a vector (one entry per unit); ``beta`` and ``tau`` are
then callables returning one value per unit.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import EpidemicDiesOut, NegativeState, StepTooLarge
from .panel import PanelDataset

__all__ = [
    "SirdParams",
    "SirdTrajectory",
    "Degenerate",
    "integrate",
    "case_growth_identity_check",
    "death_growth_identity_check",
    "SynthPanelConfig",
    "SynthTruth",
    "generate_synth_panel",
]

CONSERVATION_TOL = 1e-9


class Degenerate(enum.Enum):
    """Returned by the identity checks when a growth rate is undefined."""

    NO_INFECTION = "no infection"
    NO_DEATHS = "no deaths"


def _as_fn(v) -> Callable:
    if callable(v):
        return v
    return lambda t, _v=v: _v


@dataclass(frozen=True)
class SirdParams:
    """Population, rates and detection path.

    ``beta`` and ``tau`` are constants or callables of time (days).
    ``breakpoints`` lists times where either may jump; the identity checks
    skip finite-difference stencils that straddle them.
    """

    N: float | np.ndarray
    beta: float | Callable
    gamma: float
    kappa: float
    tau: float | Callable = 1.0
    breakpoints: tuple = ()

    def __post_init__(self):
        if np.any(np.asarray(self.N) <= 0):
            raise ValueError("population N must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 <= self.kappa <= 1:
            raise ValueError("kappa must lie in [0, 1]")

    def beta_at(self, t):
        return _as_fn(self.beta)(t)

    def tau_at(self, t):
        return _as_fn(self.tau)(t)


@dataclass(frozen=True, eq=False)
class SirdTrajectory:
    """States on a uniform time grid; arrays are ``(n_times,)`` or ``(n_times, n_units)``."""

    t: np.ndarray
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    D: np.ndarray
    C: np.ndarray

    @property
    def head(self):
        return tuple(x[0] for x in (self.S, self.I, self.R, self.D, self.C))

    @property
    def total(self) -> np.ndarray:
        return self.S + self.I + self.R + self.D

    def at_days(self) -> "SirdTrajectory":
        """Subsample to integer days."""
        keep = np.isclose(self.t, np.round(self.t), atol=1e-9)
        return SirdTrajectory(*(x[keep] for x in (self.t, self.S, self.I, self.R, self.D, self.C)))

    def weekly(self, which: str = "C") -> np.ndarray:
        """``X(t) - X(t-7)`` on the daily grid (NaN for the first week)."""
        daily = self.at_days()
        x = getattr(daily, which)
        out = np.full(x.shape, np.nan)
        out[7:] = x[7:] - x[:-7]
        return out


def _rhs(t, y, params: SirdParams, beta, tau):
    S, I = y[0], y[1]
    new = S / params.N * beta(t) * I
    out = params.gamma * I
    return np.stack([-new, new - out, (1 - params.kappa) * out, params.kappa * out, tau(t) * I])


def integrate(params: SirdParams, init, t_end: float, dt: float = 0.05, *,
              t0: float = 0.0, record_every: int = 1) -> SirdTrajectory:
    """Classical fourth-order Runge-Kutta integration of the SIRD system.

    Parameters
    ----------
    init : sequence
        ``(S, I, R, D, C)`` at ``t0``; ``S + I + R + D`` must equal ``N``.
    record_every : int
        Keep every ``record_every``-th step (plus the initial state).

    Raises
    ------
    StepTooLarge
        If ``|S + I + R + D - N| / N`` exceeds 1e-9 after any step.
    NegativeState
        If any compartment turns negative.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round((t_end - t0) / dt))
    if n_steps < 1 or not math.isclose(n_steps * dt, t_end - t0, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("t_end - t0 must be a positive multiple of dt")
    beta = _as_fn(params.beta)
    tau = _as_fn(params.tau)
    N = np.asarray(params.N, dtype=float)
    y = np.array(np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in init]), dtype=float)
    if y.shape[0] != 5:
        raise ValueError("init must hold (S, I, R, D, C)")
    if np.any(np.abs(y[:4].sum(axis=0) - N) > CONSERVATION_TOL * N):
        raise ValueError("initial state must satisfy S + I + R + D = N")
    if np.any(y < 0):
        raise NegativeState("initial state has a negative compartment")

    n_rec = n_steps // record_every + 1
    out = np.empty((n_rec,) + y.shape)
    times = np.empty(n_rec)
    out[0], times[0] = y, t0
    slack = 1e-12 * N
    k_rec = 1
    for step in range(1, n_steps + 1):
        t = t0 + (step - 1) * dt
        k1 = _rhs(t, y, params, beta, tau)
        k2 = _rhs(t + dt / 2, y + dt / 2 * k1, params, beta, tau)
        k3 = _rhs(t + dt / 2, y + dt / 2 * k2, params, beta, tau)
        k4 = _rhs(t + dt, y + dt * k3, params, beta, tau)
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.any(np.abs(y[:4].sum(axis=0) - N) > CONSERVATION_TOL * N):
            raise StepTooLarge(f"population not conserved at t={t + dt:g}; reduce dt")
        if np.any(y < -slack):
            raise NegativeState(f"negative compartment at t={t + dt:g}; reduce dt")
        if step % record_every == 0:
            out[k_rec], times[k_rec] = y, t0 + step * dt
            k_rec += 1
    return SirdTrajectory(times[:k_rec], *(out[:k_rec, j] for j in range(5)))


def _fd(x, h):
    """Central first and second differences at interior grid points."""
    d1 = (x[2:] - x[:-2]) / (2 * h)
    d2 = (x[2:] - 2 * x[1:-1] + x[:-2]) / h ** 2
    return d1, d2


def _interior(traj: SirdTrajectory, params: SirdParams):
    t = traj.t
    h = float(t[1] - t[0])
    if not np.allclose(np.diff(t), h, rtol=1e-6):
        raise ValueError("identity checks need a uniform time grid")
    keep = np.ones(t.size - 2, dtype=bool)
    for b in params.breakpoints:
        keep &= ~((t[:-2] < b) & (b < t[2:]))
    return t, h, keep


def _tau_grid(params: SirdParams, t, shape):
    tau = np.stack([np.broadcast_to(np.asarray(params.tau_at(s), dtype=float), shape[1:])
                    for s in t]) if len(shape) > 1 else np.array([params.tau_at(s) for s in t],
                                                                  dtype=float)
    return tau


def case_growth_identity_check(traj: SirdTrajectory, params: SirdParams):
    """Max deviation between ``C''/C'`` and ``(S/N) beta - gamma + tau'/tau``.

    Derivatives of ``C`` and ``tau`` are central differences on the
    trajectory grid; the comparison runs over interior points.  Returns
    ``Degenerate.NO_INFECTION`` when ``I`` is zero throughout.
    """
    if not np.any(traj.I > 0):
        return Degenerate.NO_INFECTION
    t, h, keep = _interior(traj, params)
    c1, c2 = _fd(traj.C, h)
    tau = _tau_grid(params, t, traj.C.shape)
    tau1, _ = _fd(tau, h)
    beta = np.stack([np.broadcast_to(np.asarray(params.beta_at(s), dtype=float),
                                     traj.C.shape[1:]) for s in t[1:-1]])
    rhs = traj.S[1:-1] / params.N * beta - params.gamma + tau1 / tau[1:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        lhs = c2 / c1
    dev = np.abs(lhs - rhs)[keep]
    return float(np.nanmax(dev))


def death_growth_identity_check(traj: SirdTrajectory, params: SirdParams):
    """Max deviation between ``D''/D'`` and ``C''/C' - tau'/tau``.

    Returns ``Degenerate.NO_DEATHS`` when no deaths accrue (``kappa = 0`` or
    no infection).
    """
    if params.kappa == 0 or not np.any(traj.I > 0):
        return Degenerate.NO_DEATHS
    t, h, keep = _interior(traj, params)
    d1, d2 = _fd(traj.D, h)
    c1, c2 = _fd(traj.C, h)
    tau = _tau_grid(params, t, traj.C.shape)
    tau1, _ = _fd(tau, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = np.abs(d2 / d1 - (c2 / c1 - tau1 / tau[1:-1]))[keep]
    return float(np.nanmax(dev))


# -- synthetic panels -------------------------------------------------------------

@dataclass(frozen=True)
class SynthPanelConfig:
    """Data-generating process for a synthetic county panel.

    Each unit's daily infection index is::

        lambda_it = growth0 + alpha_i + delta_{s(i), w(t)} + sum_k theta_k P_k,it + eps_it

    and enters the infection rate either as ``beta = gamma + lambda / 7``
    (``link="growth"``: ``lambda`` is the weekly log growth of infections while
    ``S/N`` stays near one) or as ``beta = gamma * exp(lambda)``
    (``link="log"``).  Reported cases on day ``t`` are infections detected
    ``case_delay`` days earlier; reported deaths lag by ``death_delay`` days.

    ``policies`` maps a column name to its true coefficient; each policy is a
    0/1 path switched on for a random ``treated_share`` of units on a day drawn
    uniformly from ``policy_window`` (and switched off again after a length
    drawn from ``episode_length`` when given).  ``covariates`` names extra
    persistent series with no effect on transmission.
    """

    n_units: int = 300
    days: int = 180
    n_states: int = 30
    start_date: str = "2020-04-01"
    policies: Mapping[str, float] = field(default_factory=lambda: {"policy": 0.05})
    treated_share: float = 0.5
    policy_window: tuple[int, int] = (40, 140)
    episode_length: tuple[int, int] | None = None
    covariates: tuple[str, ...] = ()
    growth0: float = 0.0
    unit_sd: float = 0.05
    state_week_sd: float = 0.1
    noise_sd: float = 0.1
    gamma: float = 1 / 7
    kappa: float = 0.01
    population: tuple[float, float] = (2e5, 2e6)
    initial_infected: tuple[float, float] = (2e-4, 6e-4)
    tau_base: tuple[float, float] = (0.03, 0.08)
    tau_gain: tuple[float, float] = (0.0, 1.0)
    tau_midpoint: tuple[float, float] = (30.0, 150.0)
    tau_width: float = 7.0
    case_delay: int = 10
    death_delay: int = 24
    link: str = "log"
    obs_noise: str = "poisson"
    dt: float = 0.05

    def __post_init__(self):
        if self.n_units < 2 or self.days < 2 or self.n_states < 1:
            raise ValueError("need >= 2 units, >= 2 days and >= 1 state")
        if self.n_states > self.n_units:
            raise ValueError("more states than units")
        if min(self.unit_sd, self.state_week_sd, self.noise_sd) < 0:
            raise ValueError("noise scales must be nonnegative")
        object.__setattr__(self, "policies", dict(self.policies))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.link not in ("growth", "log"):
            raise ValueError("link must be 'growth' or 'log'")
        if self.obs_noise not in ("poisson", "none"):
            raise ValueError("obs_noise must be 'poisson' or 'none'")
        steps = 1 / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("dt must divide one day")

    @classmethod
    def from_dict(cls, d) -> "SynthPanelConfig":
        d = dict(d or {})
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass(frozen=True)
class SynthTruth:
    theta: dict
    config: SynthPanelConfig
    seed: int
    alpha: np.ndarray
    state_week: np.ndarray

    def to_dict(self) -> dict:
        return {"theta": dict(self.theta), "seed": self.seed, "link": self.config.link,
                "case_delay": self.config.case_delay, "death_delay": self.config.death_delay}


def _uniform(rng, bounds, size):
    lo, hi = bounds
    return rng.uniform(lo, hi, size)


def generate_synth_panel(config: SynthPanelConfig | None = None, seed: int = 0,
                         *, return_trajectory: bool = False):
    """Simulate a county panel with known policy coefficients.

    Returns ``(dataset, truth)`` (and the daily model trajectory when
    ``return_trajectory``).  The dataset has daily series ``cases``,
    ``deaths``, ``tests``, ``population`` and one 0/1 column per policy; units
    carry a ``state`` attribute that is also the cluster map.
    """
    cfg = config or SynthPanelConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    n, days = cfg.n_units, cfg.days
    lead = max(cfg.case_delay, cfg.death_delay)
    t0 = -lead
    n_model_days = days + lead

    state = np.sort(np.arange(n) % cfg.n_states)
    pop = np.round(np.exp(_uniform(rng, np.log(cfg.population), n)))
    i0 = np.round(pop * _uniform(rng, cfg.initial_infected, n))
    alpha = rng.normal(0, cfg.unit_sd, n)
    first_week = t0 // 7
    n_weeks = (days - 1) // 7 - first_week + 1
    state_week = rng.normal(0, cfg.state_week_sd, (cfg.n_states, n_weeks))
    eps = rng.normal(0, cfg.noise_sd, (n, n_model_days))

    calendar = np.arange(days)
    policies = {}
    for name in cfg.policies:
        treated = rng.random(n) < cfg.treated_share
        start = rng.integers(cfg.policy_window[0], cfg.policy_window[1] + 1, n)
        on = calendar[None, :] >= start[:, None]
        if cfg.episode_length is not None:
            stop = start + rng.integers(cfg.episode_length[0], cfg.episode_length[1] + 1, n)
            on &= calendar[None, :] < stop[:, None]
        policies[name] = (treated[:, None] & on).astype(float)

    model_days = np.arange(t0, days)
    lam = cfg.growth0 + alpha[:, None] + state_week[state][:, model_days // 7 - first_week] + eps
    for name, theta in cfg.policies.items():
        lam[:, lead:] += theta * policies[name]
    if cfg.link == "growth":
        beta_table = np.maximum(cfg.gamma + lam / 7, 0.0)
    else:
        beta_table = cfg.gamma * np.exp(lam)

    tau0 = _uniform(rng, cfg.tau_base, n)
    gain = _uniform(rng, cfg.tau_gain, n)
    mid = _uniform(rng, cfg.tau_midpoint, n)

    def tau(t):
        return tau0 * (1 + gain / (1 + np.exp(-(t - mid) / cfg.tau_width)))

    def beta(t):
        # left-continuous daily steps: (d, d+1] uses day d
        k = min(max(math.ceil(t - t0 - 1e-9) - 1, 0), n_model_days - 1)
        return beta_table[:, k]

    params = SirdParams(pop, beta, cfg.gamma, cfg.kappa, tau,
                        breakpoints=tuple(float(d) for d in range(t0 + 1, days)))
    init = (pop - i0, i0, np.zeros(n), np.zeros(n), np.zeros(n))
    traj = integrate(params, init, float(days), cfg.dt, t0=float(t0),
                     record_every=int(round(1 / cfg.dt)))
    if np.mean(traj.I.min(axis=0) < 1) > 0.5:
        warnings.warn("infections fell below one person in more than half of the units",
                      EpidemicDiesOut, stacklevel=2)

    # traj rows are model days t0..days; row of model day m is m - t0
    def reported(X, delay):
        rows = calendar - delay - t0
        return X[rows].T - X[rows - 1].T

    new_cases = reported(traj.C, cfg.case_delay)
    new_deaths = reported(traj.D, cfg.death_delay)
    tests = (pop[:, None] * tau(calendar[None, :].T - cfg.case_delay).T * 0.5)
    if cfg.obs_noise == "poisson":
        new_cases = rng.poisson(np.maximum(new_cases, 0.0)).astype(float)
        new_deaths = rng.poisson(np.maximum(new_deaths, 0.0)).astype(float)
        tests = rng.poisson(tests).astype(float)
    else:
        new_cases, new_deaths, tests = (np.round(x) for x in (new_cases, new_deaths, tests))

    extra = {}
    for name in cfg.covariates:
        shocks = rng.normal(0, 0.02, (n, days))
        path = np.empty((n, days))
        path[:, 0] = shocks[:, 0] / np.sqrt(1 - 0.9 ** 2)
        for d in range(1, days):
            path[:, d] = 0.9 * path[:, d - 1] + shocks[:, d]
        extra[name] = 0.3 + path

    start = np.datetime64(cfg.start_date, "D")
    dates = start + np.arange(days)
    width = len(str(n - 1))
    units = tuple(f"u{i:0{width}d}" for i in range(n))
    states = tuple(f"s{s:02d}" for s in state)
    series = {"cases": new_cases, "deaths": new_deaths, "tests": tests,
              "population": np.repeat(pop[:, None], days, axis=1), **policies, **extra}
    dataset = PanelDataset(units, dates, series, {"state": states}, dict(zip(units, states)))
    truth = SynthTruth(dict(cfg.policies), cfg, seed, alpha, state_week)
    if return_trajectory:
        return dataset, truth, traj
    return dataset, truth
