"""Budget-constrained episodic alert environment over replayed weather.

An episode pairs one draw of county coefficients with one observed
county-summer of weather (possibly borrowed from another county in the same
climate region). Rewards are scaled expected rates, so an episode is
deterministic once the coefficients, trajectory and actions are fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import data as dc
from . import kernels
from .rewards import CoefficientSet

TRAIN_YEARS = (2006, 2008, 2009, 2010, 2012, 2013, 2014, 2016)
EVAL_YEARS = (2007, 2011, 2015)
MODES = ("train", "validate", "evaluate")
N_FUTURE_DAYS = 10
FUTURE_QUANTILES = (50, 60, 70, 80, 90, 100)
N_FUTURE = N_FUTURE_DAYS + len(FUTURE_QUANTILES)
HEAT_DELTA_SCALE = 10.0
OBS_NAMES = (
    "qhi", "excess_heat", "dos_frac", "weekend",
    "alerts_2wk", "alert_yesterday", "budget_ratio", "time",
)


class EnvConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


def future_block(heat_index, qhi) -> np.ndarray:
    """Day-over-day heat-index change for the next 10 days (scaled by 1/10, zero past
    the season end) followed by QHI percentiles of the remaining season."""
    heat_index = np.asarray(heat_index, dtype=float)
    qhi = np.asarray(qhi, dtype=float)
    H = heat_index.size
    out = np.zeros((H, N_FUTURE))
    diffs = np.diff(heat_index) / HEAT_DELTA_SCALE
    for t in range(H):
        d = diffs[t:t + N_FUTURE_DAYS]
        out[t, :d.size] = d
        out[t, N_FUTURE_DAYS:] = np.percentile(qhi[t:], FUTURE_QUANTILES)
    return out


def compute_c2(hosp, population) -> float:
    """Reciprocal of the mean daily per-capita hospitalization rate of one county-year.

    A season without hospitalizations falls back to half a case over the season.
    """
    hosp = np.asarray(hosp, dtype=float)
    population = np.asarray(population, dtype=float)
    rate = float(np.mean(hosp / population))
    if rate <= 0:
        rate = 0.5 / (float(np.mean(population)) * hosp.size)
    return 1.0 / rate


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Exogenous inputs of one county-summer."""

    county_id: str
    region: str
    year: int
    base_obs: np.ndarray    # (H, 4): qhi, excess_heat, dos_frac, weekend
    future: np.ndarray      # (H, N_FUTURE)
    lam_design: np.ndarray  # (H, N_LAMBDA_EXO)
    tau_design: np.ndarray  # (H, N_TAU_EXO)
    heat_index: np.ndarray
    alerts: np.ndarray
    budget: int
    c2: float

    @property
    def H(self) -> int:
        return self.base_obs.shape[0]

    @property
    def qhi(self) -> np.ndarray:
        return self.base_obs[:, 0]


def trajectory_from_table(table: dc.CountyTable, j: int) -> Trajectory:
    if not table.engineered:
        table = dc.engineer_features(table)
    qhi, ex, dos, wk = table.qhi[j], table.excess_heat[j], table.dos_frac[j], table.weekend[j]
    lam, tau = dc.exogenous_design(qhi, ex, dos, wk)
    return Trajectory(
        county_id=table.county_id,
        region=table.spatial.climate_region,
        year=int(table.years[j]),
        base_obs=np.column_stack([qhi, ex, dos, wk]),
        future=future_block(table.heat_index[j], qhi),
        lam_design=lam,
        tau_design=tau,
        heat_index=np.asarray(table.heat_index[j], dtype=float),
        alerts=np.asarray(table.alert[j], dtype=np.int8),
        budget=int(table.alert[j].sum()),
        c2=compute_c2(table.hosp[j], table.population[j]),
    )


class PosteriorCoefficients:
    """Coefficient source drawing from a fitted variational posterior."""

    def __init__(self, posterior):
        self.posterior = posterior

    def sample(self, county_id, rng) -> CoefficientSet:
        beta, delta = self.posterior.sample_arrays(county_id, 1, rng)
        return CoefficientSet(beta[0], delta[0])


class FixedCoefficients:
    """Coefficient source returning fixed per-county values (ground truth, toys)."""

    def __init__(self, coeffs: dict):
        self.coeffs = dict(coeffs)

    def sample(self, county_id, rng) -> CoefficientSet:
        return self.coeffs[county_id]


@dataclass(frozen=True)
class EpisodeSpec:
    county_id: str
    year: int
    source_county: str
    budget: int
    coeffs: CoefficientSet
    future_info: bool


@dataclass(eq=False)
class Episode:
    spec: EpisodeSpec
    traj: Trajectory
    northern: bool = False
    lam_exo: np.ndarray = field(init=False)
    tau_exo: np.ndarray = field(init=False)
    endo: np.ndarray = field(init=False)

    def __post_init__(self):
        beta, delta = self.spec.coeffs.beta, self.spec.coeffs.delta
        n_le, n_te = self.traj.lam_design.shape[1], self.traj.tau_design.shape[1]
        self.lam_exo = self.traj.lam_design @ beta[:n_le]
        with np.errstate(invalid="ignore"):
            self.tau_exo = self.traj.tau_design @ delta[:n_te]
        self.endo = np.array([beta[n_le], beta[n_le + 1], delta[n_te], delta[n_te + 1]], dtype=float)

    @property
    def H(self) -> int:
        return self.traj.H

    @property
    def budget(self) -> int:
        return self.spec.budget

    @property
    def c2(self) -> float:
        return self.traj.c2

    @property
    def future(self) -> np.ndarray:
        return self.traj.future if self.spec.future_info else np.zeros((self.H, 0))

    @property
    def n_obs(self) -> int:
        return kernels.N_BASE_OBS + self.future.shape[1]

    def rates(self, t, count, yday):
        """Baseline rate and alert effectiveness at day ``t`` given the alert history."""
        b2, by, d2, dy = self.endo
        lam = math.exp(self.lam_exo[t] + b2 * (count / dc.ALERT_WINDOW) + by * yday)
        tau = 1.0 / (1.0 + math.exp(-(self.tau_exo[t] + d2 * (count / dc.ALERT_WINDOW) + dy * yday)))
        return lam, tau


class World:
    """Shared, read-only simulation inputs: trajectories plus a coefficient source."""

    def __init__(self, trajectories, coefficients, train_years=TRAIN_YEARS, eval_years=EVAL_YEARS,
                 future_info=False, northern=None):
        self.trajectories = list(trajectories)
        self.coefficients = coefficients
        self.train_years = frozenset(int(y) for y in train_years)
        self.eval_years = frozenset(int(y) for y in eval_years)
        if self.train_years & self.eval_years:
            raise EnvConfigError("training and evaluation years overlap")
        self.future_info = bool(future_info)
        self.region = {tr.county_id: tr.region for tr in self.trajectories}
        self.northern = dict(northern or {})
        self._index = {}
        for tr in self.trajectories:
            self._index.setdefault(tr.county_id, []).append(tr)

    @classmethod
    def from_tables(cls, tables: dict, coefficients, train_years=TRAIN_YEARS, eval_years=EVAL_YEARS,
                    future_info=False):
        trajs = [trajectory_from_table(tables[cid], j)
                 for cid in sorted(tables) for j in range(tables[cid].n_years)]
        northern = {cid: bool(tables[cid].spatial.northern) for cid in tables}
        return cls(trajs, coefficients, train_years, eval_years, future_info, northern)

    def with_future(self, future_info: bool) -> "World":
        new = object.__new__(World)
        new.__dict__.update(self.__dict__)
        new.future_info = bool(future_info)
        return new

    @property
    def counties(self) -> list[str]:
        return sorted(self._index)

    def years_for(self, mode) -> frozenset:
        if mode not in MODES:
            raise EnvConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        return self.train_years if mode == "train" else self.eval_years

    def candidates(self, county_id, years, augment, exclude_self=False) -> list[Trajectory]:
        if county_id not in self.region:
            raise KeyError(f"county {county_id!r} not in dataset")
        years = frozenset(int(y) for y in years)
        if augment:
            region = self.region[county_id]
            pool = [tr for tr in self.trajectories if tr.region == region]
        else:
            pool = list(self._index[county_id])
        if exclude_self:
            pool = [tr for tr in pool if tr.county_id != county_id]
        return [tr for tr in pool if tr.year in years]

    def sample_exogenous(self, county_id, years, augment, rng, exclude_self=False):
        """Draw a trajectory uniformly from the candidate county-years; returns ``(trajectory, budget)``."""
        pool = self.candidates(county_id, years, augment, exclude_self)
        if not pool:
            raise EnvConfigError(
                f"no trajectories for county {county_id} in years {sorted(years)} "
                f"(augment={augment}, exclude_self={exclude_self})")
        tr = pool[int(rng.integers(len(pool)))]
        return tr, tr.budget

    def sample_episode(self, county_id, mode, rng) -> Episode:
        years = self.years_for(mode)
        if mode == "train":
            tr, b = self.sample_exogenous(county_id, years, True, rng)
        elif mode == "validate":
            tr, b = self.sample_exogenous(county_id, years, True, rng, exclude_self=True)
        else:
            tr, b = self.sample_exogenous(county_id, years, False, rng)
        coeffs = self.coefficients.sample(county_id, rng)
        spec = EpisodeSpec(county_id, tr.year, tr.county_id, b, coeffs, self.future_info)
        return Episode(spec, tr, self.northern.get(county_id, False))


def make_observation(episode: Episode, t, count, yday, b_rem) -> np.ndarray:
    H = episode.H
    base = episode.traj.base_obs[t]
    ratio = b_rem / (H - t)
    head = [base[0], base[1], base[2], base[3], count / dc.ALERT_WINDOW, float(yday),
            1.0 if ratio > 1.0 else ratio, t * (1.0 / (H - 1) if H > 1 else 0.0)]
    return np.concatenate([head, episode.future[t]])


@dataclass
class EpisodeContext:
    """What a policy may consult beyond the observation."""

    t: int
    budget: int
    budget_remaining: int
    days_remaining: int
    heat_index: float
    nws_alert: int
    northern: bool
    qhi_episode: np.ndarray | None = None  # oracle access (TopK only)


class BroachEnv:
    """Step-by-step interface: ``reset() -> obs``, ``step(a) -> (obs, reward, done, info)``."""

    def __init__(self, world: World, county_id, mode="train", rng=None):
        if mode not in MODES:
            raise EnvConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.world = world
        self.county_id = county_id
        self.mode = mode
        self.rng = np.random.default_rng(rng)
        self.episode = None
        self.t = 0
        self.done = True

    def reset(self, episode: Episode | None = None) -> np.ndarray:
        self.episode = episode or self.world.sample_episode(self.county_id, self.mode, self.rng)
        self.t = 0
        self.budget_remaining = self.episode.budget
        self.history = []
        self.count = 0
        self.yday = 0
        self.done = False
        return self.observation()

    def observation(self) -> np.ndarray:
        t = min(self.t, self.episode.H - 1)
        return make_observation(self.episode, t, self.count, self.yday, self.budget_remaining)

    def context(self, oracle=False) -> EpisodeContext:
        ep, t = self.episode, self.t
        return EpisodeContext(
            t=t, budget=ep.budget, budget_remaining=self.budget_remaining,
            days_remaining=ep.H - t, heat_index=float(ep.traj.heat_index[t]),
            nws_alert=int(ep.traj.alerts[t]), northern=ep.northern,
            qhi_episode=ep.traj.qhi if oracle else None,
        )

    def step(self, action):
        if self.done:
            raise ProtocolError("step() called on a finished episode; call reset()")
        ep, t = self.episode, self.t
        a_eff = 1 if (action and self.budget_remaining > 0) else 0
        lam, tau = ep.rates(t, self.count, self.yday)
        reward = 1.0 - ep.c2 * lam * (1.0 - a_eff * tau)
        self.history.append(a_eff)
        self.budget_remaining -= a_eff
        self.count += a_eff
        if t - dc.ALERT_WINDOW >= 0:
            self.count -= self.history[t - dc.ALERT_WINDOW]
        self.yday = a_eff
        self.t += 1
        self.done = self.t >= ep.H
        info = {
            "rho_a": lam * (1.0 - a_eff * tau),
            "rho_0": lam,
            "effective_action": a_eff,
            "budget_remaining": self.budget_remaining,
            "lam": lam,
            "tau": tau,
            "xi": ep.traj.base_obs[t].copy(),
        }
        return self.observation(), reward, self.done, info


def episode_return(rewards) -> float:
    """Undiscounted sum of rewards."""
    return float(np.sum(np.asarray(rewards, dtype=float)))


@dataclass
class EpisodeResult:
    attempted: np.ndarray
    effective: np.ndarray
    rewards: np.ndarray
    probs: np.ndarray
    forced: np.ndarray
    lam: np.ndarray
    tau: np.ndarray
    obs: np.ndarray | None

    @property
    def total(self) -> float:
        return episode_return(self.rewards)


def run_episode(episode: Episode, policy, action_rng=None, uniforms=None, record_obs=False,
                backend=None) -> EpisodeResult:
    """Roll out ``policy`` on a fixed episode with the kernel.

    The action stream is ``action_rng.random((H, 2))``; a step-by-step loop
    calling ``rng.random(2)`` each day consumes the same numbers.
    """
    if uniforms is None:
        rng = action_rng if action_rng is not None else np.random.default_rng(0)
        uniforms = rng.random((episode.H, 2))
    kw = policy.kernel_args(episode)
    out = kernels.run(
        episode.traj.base_obs, episode.future, episode.lam_exo, episode.tau_exo, episode.endo,
        episode.c2, episode.budget, kw["mode"], kw.get("intents"), uniforms, kw.get("packed"),
        kw.get("epsilon", 0.0), kw.get("threshold", 0.0), record_obs, backend,
    )
    return EpisodeResult(*out)
