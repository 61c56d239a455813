"""MiniCity: a small stochastic agent-based epidemic model.

Agents live in households and are assigned a workplace. Each day is split
into a work block and a home block; exposure happens per infectious
co-located agent per contact-hour. Outputs are the daily hospital census
(Hospitalized + ICU) and cumulative deaths.

Randomness comes from counter-based Philox streams keyed on
``(seed, stream, day)`` so that every draw is a pure function of the run
seed, the stream name and the day, independent of how many draws other
streams consumed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Raised for an invalid simulation configuration."""


class State(IntEnum):
    SUSCEPTIBLE = 0
    EXPOSED = 1
    PRESYMPTOMATIC = 2
    INFECTED_ASYMPTOMATIC = 3
    INFECTED_SYMPTOMATIC = 4
    HOSPITALIZED = 5
    HOSPITALIZED_ICU = 6
    RECOVERED = 7
    DECEASED = 8


N_STATES = len(State)
INFECTIOUS = (State.PRESYMPTOMATIC, State.INFECTED_ASYMPTOMATIC, State.INFECTED_SYMPTOMATIC)

# stream ids for the Philox key derivation
_POPULATION, _SEEDING, _BEHAVIOUR, _TRANSMISSION, _PROGRESSION = range(5)


@dataclass(frozen=True)
class GammaDuration:
    shape: float
    scale: float

    @property
    def mean(self) -> float:
        return self.shape * self.scale


def _default_durations() -> dict[str, GammaDuration]:
    return {
        "exposed": GammaDuration(3.0, 1.0),
        "presymptomatic": GammaDuration(2.0, 1.0),
        "asymptomatic": GammaDuration(4.0, 1.75),
        "symptomatic": GammaDuration(4.0, 1.75),
        "hospitalized": GammaDuration(3.0, 3.0),
        "icu": GammaDuration(3.0, 4.0),
    }


@dataclass(frozen=True)
class SimConfig:
    """Fixed (non-calibrated) settings of MiniCity."""

    n_agents: int = 5000
    n_households: int = 1500
    n_workplaces: int = 250
    horizon: int = 120
    n_initial: int = 10
    # day from which stay-at-home and protective behaviour are in effect
    intervention_day: int = 80
    work_hours: int = 8
    home_contact: float = 0.05
    work_contact: float = 0.05
    protective_factor: float = 0.5
    p_asymptomatic: float = 0.35
    p_hosp: float = 0.2
    p_icu: float = 0.35
    p_death: float = 0.2
    durations: dict[str, GammaDuration] = field(default_factory=_default_durations)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_agents < 1:
            raise ConfigError("population size must be positive")
        if self.n_households < 1 or self.n_workplaces < 1:
            raise ConfigError("place counts must be positive")
        if self.horizon < 1:
            raise ConfigError("horizon must be at least one day")
        if not 0 <= self.n_initial <= self.n_agents:
            raise ConfigError("n_initial must lie in [0, n_agents]")
        if not 0 <= self.work_hours <= 24:
            raise ConfigError("work_hours must lie in [0, 24]")
        for name in ("home_contact", "work_contact", "protective_factor",
                     "p_asymptomatic", "p_hosp", "p_icu", "p_death"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} is not a probability")
        if self.p_death > self.p_icu:
            raise ConfigError("deaths occur in ICU, so p_death must not exceed p_icu")
        missing = set(_default_durations()) - set(self.durations)
        if missing:
            raise ConfigError(f"missing stage durations: {sorted(missing)}")
        for stage, d in self.durations.items():
            if not (d.shape > 0 and d.scale > 0):
                raise ConfigError(f"gamma parameters for {stage!r} must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["durations"] = {k: [v.shape, v.scale] for k, v in self.durations.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown simulation config keys: {sorted(unknown)}")
        if "durations" in data:
            durations = _default_durations()
            for k, v in data["durations"].items():
                if isinstance(v, dict):
                    durations[k] = GammaDuration(float(v["shape"]), float(v["scale"]))
                else:
                    durations[k] = GammaDuration(float(v[0]), float(v[1]))
            data["durations"] = durations
        return cls(**data)


def load_sim_config(path: str | Path) -> SimConfig:
    """Read a YAML simulation config; missing keys take their defaults."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if "simulation" in data and isinstance(data["simulation"], dict):
        data = data["simulation"]
    return SimConfig.from_dict(data)


@dataclass(frozen=True)
class SimParams:
    """The four calibrated parameters.

    theta1: exposure probability per infectious contact-hour
    theta2: infection seeding day (rounded up to a whole day)
    theta3: daily stay-at-home probability
    theta4: daily protective-behaviour probability
    """

    theta1: float
    theta2: float
    theta3: float
    theta4: float

    def __post_init__(self):
        for name in ("theta1", "theta3", "theta4"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} is not a probability")
        if not self.theta2 >= 0:
            raise ConfigError("seeding day theta2 must be non-negative")

    @classmethod
    def from_array(cls, theta: Sequence[float]) -> "SimParams":
        t = [float(x) for x in theta]
        if len(t) != 4:
            raise ConfigError(f"expected 4 parameters, got {len(t)}")
        return cls(*t)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3, self.theta4])

    @property
    def seeding_day(self) -> int:
        return int(math.ceil(self.theta2))


@dataclass
class Trajectory:
    days: np.ndarray
    hosp_census: np.ndarray
    cum_deaths: np.ndarray
    seed: int | None = None
    # optional (horizon, 9) per-state counts, recorded on request
    state_counts: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.days)

    def concat(self) -> np.ndarray:
        return np.concatenate([self.hosp_census, self.cum_deaths]).astype(float)


@dataclass
class Population:
    household: np.ndarray
    workplace: np.ndarray
    state: np.ndarray
    entry_day: np.ndarray
    duration: np.ndarray

    @property
    def size(self) -> int:
        return len(self.household)


def _stream(seed: int, stream: int, day: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & MASK64, spawn_key=(stream, day))
    return np.random.Generator(np.random.Philox(ss))


def init_population(config: SimConfig, seed: int) -> Population:
    """Assign every agent a household and a workplace; nobody is infected."""
    config.validate()
    rng = _stream(seed, _POPULATION)
    n = config.n_agents
    household = rng.integers(0, config.n_households, size=n)
    workplace = rng.integers(0, config.n_workplaces, size=n)
    return Population(
        household=household,
        workplace=workplace,
        state=np.full(n, State.SUSCEPTIBLE, dtype=np.int8),
        entry_day=np.zeros(n, dtype=np.int64),
        duration=np.zeros(n, dtype=np.int64),
    )


def _draw_durations(rng: np.random.Generator, d: GammaDuration, size: int) -> np.ndarray:
    x = rng.gamma(d.shape, d.scale, size=size)
    return np.maximum(np.ceil(x), 1).astype(np.int64)


def _enter(pop: Population, idx: np.ndarray, new_state: State, day: int,
           rng: np.random.Generator, d: GammaDuration | None) -> None:
    pop.state[idx] = new_state
    pop.entry_day[idx] = day
    if d is None:
        pop.duration[idx] = 0
    else:
        pop.duration[idx] = _draw_durations(rng, d, len(idx))


def _progress(pop: Population, day: int, config: SimConfig, rng: np.random.Generator) -> None:
    st = pop.state
    due = (pop.duration > 0) & (pop.entry_day + pop.duration <= day)
    if not due.any():
        return
    dur = config.durations
    # snapshot the per-state index sets before mutating states
    groups = {s: np.flatnonzero(due & (st == s)) for s in (
        State.EXPOSED, State.PRESYMPTOMATIC, State.INFECTED_ASYMPTOMATIC,
        State.INFECTED_SYMPTOMATIC, State.HOSPITALIZED, State.HOSPITALIZED_ICU)}
    # branch uniforms drawn once per due agent in index order
    u = np.zeros(len(st))
    u[due] = rng.random(int(due.sum()))

    idx = groups[State.EXPOSED]
    asym = u[idx] < config.p_asymptomatic
    _enter(pop, idx[asym], State.INFECTED_ASYMPTOMATIC, day, rng, dur["asymptomatic"])
    _enter(pop, idx[~asym], State.PRESYMPTOMATIC, day, rng, dur["presymptomatic"])

    _enter(pop, groups[State.PRESYMPTOMATIC], State.INFECTED_SYMPTOMATIC, day, rng,
           dur["symptomatic"])
    _enter(pop, groups[State.INFECTED_ASYMPTOMATIC], State.RECOVERED, day, rng, None)

    idx = groups[State.INFECTED_SYMPTOMATIC]
    hosp = u[idx] < config.p_hosp
    _enter(pop, idx[hosp], State.HOSPITALIZED, day, rng, dur["hospitalized"])
    _enter(pop, idx[~hosp], State.RECOVERED, day, rng, None)

    idx = groups[State.HOSPITALIZED]
    icu = u[idx] < config.p_icu
    _enter(pop, idx[icu], State.HOSPITALIZED_ICU, day, rng, dur["icu"])
    _enter(pop, idx[~icu], State.RECOVERED, day, rng, None)

    idx = groups[State.HOSPITALIZED_ICU]
    p_die = config.p_death / config.p_icu if config.p_icu > 0 else 0.0
    die = u[idx] < p_die
    _enter(pop, idx[die], State.DECEASED, day, rng, None)
    _enter(pop, idx[~die], State.RECOVERED, day, rng, None)


def _transmit(pop: Population, day: int, params: SimParams, config: SimConfig,
              seed: int) -> np.ndarray:
    """Return indices of agents newly exposed on ``day``."""
    st = pop.state
    susceptible = st == State.SUSCEPTIBLE
    infectious = (st == State.PRESYMPTOMATIC) | (st == State.INFECTED_ASYMPTOMATIC) | (
        st == State.INFECTED_SYMPTOMATIC)
    if not infectious.any() or not susceptible.any() or params.theta1 == 0.0:
        return np.empty(0, dtype=np.int64)
    n = pop.size
    in_community = (st != State.HOSPITALIZED) & (st != State.HOSPITALIZED_ICU) & (
        st != State.DECEASED)

    beh = _stream(seed, _BEHAVIOUR, day)
    stay_u = beh.random(n)
    protect_u = beh.random(n)
    if day >= config.intervention_day:
        stays = stay_u < params.theta3
        protective = protect_u < params.theta4
    else:
        stays = np.zeros(n, dtype=bool)
        protective = np.zeros(n, dtype=bool)
    # symptomatic agents isolate at home
    at_work = in_community & ~stays & (st != State.INFECTED_SYMPTOMATIC)

    inf_home = infectious & in_community
    home_all = np.bincount(pop.household[inf_home], minlength=config.n_households)
    home_day = np.bincount(pop.household[inf_home & ~at_work], minlength=config.n_households)
    work = np.bincount(pop.workplace[infectious & at_work], minlength=config.n_workplaces)

    night_hours = 24 - config.work_hours
    home_hours = night_hours * home_all[pop.household] + np.where(
        at_work, 0, config.work_hours * home_day[pop.household])
    work_hours = np.where(at_work, config.work_hours * work[pop.workplace], 0)

    p = params.theta1 * np.where(protective, config.protective_factor, 1.0)
    # independent Bernoulli trials per infectious agent-hour
    log_escape = home_hours * np.log1p(-p * config.home_contact) + work_hours * np.log1p(
        -p * config.work_contact)
    p_inf = -np.expm1(log_escape)
    u = _stream(seed, _TRANSMISSION, day).random(n)
    return np.flatnonzero(susceptible & (u < p_inf))


def run_simulation(params: SimParams, seed: int, config: SimConfig | None = None,
                   record_states: bool = False) -> Trajectory:
    """One seeded MiniCity run over ``config.horizon`` days."""
    config = config or SimConfig()
    pop = init_population(config, seed)
    horizon = config.horizon
    hosp = np.zeros(horizon, dtype=np.int64)
    deaths = np.zeros(horizon, dtype=np.int64)
    counts = np.zeros((horizon, N_STATES), dtype=np.int64) if record_states else None
    seed_day = params.seeding_day
    started = False

    for day in range(horizon):
        if day == seed_day and config.n_initial > 0:
            rng = _stream(seed, _SEEDING)
            idx = np.sort(rng.choice(config.n_agents, size=config.n_initial, replace=False))
            _enter(pop, idx, State.EXPOSED, day, rng, config.durations["exposed"])
            started = True
        if started:
            rng = _stream(seed, _PROGRESSION, day)
            _progress(pop, day, config, rng)
            new = _transmit(pop, day, params, config, seed)
            if len(new):
                _enter(pop, new, State.EXPOSED, day, rng, config.durations["exposed"])
        st = pop.state
        hosp[day] = np.count_nonzero((st == State.HOSPITALIZED) | (st == State.HOSPITALIZED_ICU))
        deaths[day] = np.count_nonzero(st == State.DECEASED)
        if counts is not None:
            counts[day] = np.bincount(st, minlength=N_STATES)

    return Trajectory(np.arange(horizon), hosp, deaths, seed=seed, state_counts=counts)


@dataclass
class MeanTrajectory:
    days: np.ndarray
    hosp_census: np.ndarray
    cum_deaths: np.ndarray
    seeds: tuple[int, ...] = ()

    def concat(self) -> np.ndarray:
        return np.concatenate([self.hosp_census, self.cum_deaths])


def mean_of(trajectories: Sequence[Trajectory]) -> MeanTrajectory:
    if not trajectories:
        raise ValueError("need at least one trajectory")
    hosp = np.mean([t.hosp_census for t in trajectories], axis=0, dtype=float)
    deaths = np.mean([t.cum_deaths for t in trajectories], axis=0, dtype=float)
    return MeanTrajectory(trajectories[0].days.copy(), hosp, deaths,
                          tuple(t.seed for t in trajectories))


def run_mean_model(params: SimParams, seeds: Sequence[int],
                   config: SimConfig | None = None) -> MeanTrajectory:
    """Average MiniCity output over ``seeds`` (the "mean model")."""
    if len(seeds) == 0:
        raise ValueError("run_mean_model needs at least one seed")
    return mean_of([run_simulation(params, s, config) for s in seeds])


def attack_rate(params: SimParams, seed: int, config: SimConfig | None = None) -> float:
    """Fraction of agents ever infected in one run."""
    config = config or SimConfig()
    traj = run_simulation(params, seed, config, record_states=True)
    final = traj.state_counts[-1]
    return 1.0 - final[State.SUSCEPTIBLE] / config.n_agents


def trajectory_filename(row_id: int | str, seed: int) -> str:
    return f"traj_p{row_id}_s{seed}.csv"


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "hosp_census", "cum_deaths"])
        for d, h, c in zip(traj.days, traj.hosp_census, traj.cum_deaths):
            w.writerow([int(d), int(h), int(c)])


def read_trajectory_csv(path: str | Path, seed: int | None = None) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return Trajectory(data[:, 0], data[:, 1], data[:, 2], seed=seed)


def with_overrides(config: SimConfig, **kw) -> SimConfig:
    return replace(config, **kw)
