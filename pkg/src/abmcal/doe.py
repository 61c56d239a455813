"""Quasi-random training design over the prior box and its ensemble runs."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .sim import (MeanTrajectory, SimConfig, SimParams, mean_of, read_trajectory_csv,
                  run_simulation, trajectory_filename, write_trajectory_csv)
from .util import read_rows, write_rows

log = logging.getLogger(__name__)

PARAM_NAMES = ("theta1", "theta2", "theta3", "theta4")
FIRST_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53)


class DesignError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    names: tuple[str, ...] = PARAM_NAMES

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be equal-length vectors")
        if len(self.names) != len(lo):
            raise ValueError("one name per dimension required")
        if not np.all(lo < hi):
            raise ValueError(f"prior box needs lower < upper in every dimension: {lo} {hi}")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, float)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def scale(self, u: np.ndarray) -> np.ndarray:
        """Map unit-cube points into the box."""
        return self.lo + np.asarray(u, float) * self.width

    def unscale(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, float) - self.lo) / self.width

    def contains(self, x: np.ndarray) -> bool | np.ndarray:
        x = np.asarray(x, float)
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def log_volume(self) -> float:
        return float(np.sum(np.log(self.width)))

    def to_dict(self) -> dict:
        return {n: [float(a), float(b)] for n, a, b in zip(self.names, self.lower, self.upper)}

    @classmethod
    def from_dict(cls, data: dict) -> "PriorBox":
        names = tuple(data)
        return cls(tuple(float(data[n][0]) for n in names),
                   tuple(float(data[n][1]) for n in names), names)

    @classmethod
    def unit(cls, dim: int) -> "PriorBox":
        return cls((0.0,) * dim, (1.0,) * dim, tuple(f"x{i + 1}" for i in range(dim)))


# uniform prior ranges for the four retained parameters
DEFAULT_PRIOR_BOX = PriorBox((0.046, 31.0, 0.939, 0.407), (0.069, 59.0, 0.981, 0.492))


def load_prior_box(path: str | Path) -> PriorBox:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if "prior_box" in data:
        data = data["prior_box"]
    return PriorBox.from_dict(data)


def radical_inverse(index: int | np.ndarray, base: int) -> float | np.ndarray:
    """Van der Corput radical inverse of ``index`` in ``base``."""
    i = np.array(index, dtype=np.int64, copy=True)
    out = np.zeros(i.shape)
    f = 1.0 / base
    while np.any(i > 0):
        out += f * (i % base)
        i //= base
        f /= base
    return float(out) if out.ndim == 0 else out


def halton_point(index: int, bases: Sequence[int]) -> np.ndarray:
    if index < 1:
        raise ValueError("Halton indices start at 1")
    if len(set(bases)) != len(bases):
        raise ValueError("Halton bases must be distinct primes")
    return np.array([radical_inverse(index, b) for b in bases])


def halton(n: int, bases: Sequence[int], start: int = 1) -> np.ndarray:
    """``n`` consecutive Halton points starting at index ``start`` (n x d)."""
    if start < 1:
        raise ValueError("Halton indices start at 1")
    idx = np.arange(start, start + n, dtype=np.int64)
    return np.column_stack([radical_inverse(idx, b) for b in bases])


def generate_design(n: int, box: PriorBox = DEFAULT_PRIOR_BOX,
                    bases: Sequence[int] | None = None) -> np.ndarray:
    if n < 1:
        raise ValueError("design needs at least one point")
    bases = tuple(bases) if bases is not None else FIRST_PRIMES[:box.dim]
    if len(bases) != box.dim:
        raise ValueError("one Halton base per box dimension")
    return box.scale(halton(n, bases))


@dataclass
class DesignMatrix:
    thetas: np.ndarray          # (m, 4)
    seeds: tuple[int, ...]
    hosp: np.ndarray            # (m, horizon) mean census
    deaths: np.ndarray          # (m, horizon) mean cumulative deaths
    config: SimConfig = field(default_factory=SimConfig)

    def __len__(self) -> int:
        return len(self.thetas)

    @property
    def horizon(self) -> int:
        return self.hosp.shape[1]

    def outputs(self) -> np.ndarray:
        """Temporally concatenated (hosp, deaths) rows, m x 2n."""
        return np.hstack([self.hosp, self.deaths])

    def row(self, i: int) -> MeanTrajectory:
        return MeanTrajectory(np.arange(self.horizon), self.hosp[i], self.deaths[i], self.seeds)

    def subset(self, idx) -> "DesignMatrix":
        return DesignMatrix(self.thetas[idx], self.seeds, self.hosp[idx], self.deaths[idx],
                            self.config)


MANIFEST = "manifest.csv"
RUNS_DIR = "runs"
CONFIG_FILE = "sim_config.yaml"


def mean_filename(row_id: int) -> str:
    return f"mean_p{row_id}.csv"


def _write_manifest(out: Path, design: np.ndarray, seed_count: int, status: list[str]) -> None:
    rows = [[i, *map(float, th), seed_count, st] for i, (th, st) in enumerate(zip(design, status))]
    tmp = out / (MANIFEST + ".tmp")
    write_rows(tmp, ["row_id", *PARAM_NAMES, "seed_count", "status"], rows)
    os.replace(tmp, out / MANIFEST)


def _write_mean(path: Path, mean: MeanTrajectory) -> None:
    tmp = path.with_suffix(".tmp")
    write_rows(tmp, ["day", "mean_hosp", "mean_cum_deaths"],
               ([int(d), float(h), float(c)] for d, h, c in
                zip(mean.days, mean.hosp_census, mean.cum_deaths)))
    os.replace(tmp, path)


def _run_row(args) -> tuple[int, MeanTrajectory]:
    row_id, theta, seeds, config, runs_dir = args
    trajs = []
    for s in seeds:
        path = Path(runs_dir) / trajectory_filename(row_id, s)
        if path.exists():
            trajs.append(read_trajectory_csv(path, seed=s))
            continue
        traj = _sim_or_raise(row_id, theta, s, config)
        tmp = path.with_suffix(".tmp")
        write_trajectory_csv(traj, tmp)
        os.replace(tmp, path)
        trajs.append(traj)
    return row_id, mean_of(trajs)


def run_design(design: np.ndarray, seeds_per_point: int, config: SimConfig | None = None,
               out: str | Path | None = None, jobs: int = 1,
               resume: bool = True) -> DesignMatrix:
    """Run the mean model at every design row and persist the dataset.

    Every row shares the seeds ``1..seeds_per_point``. With ``out`` given,
    each (row, seed) trajectory is checkpointed to ``out/runs`` and each
    row's mean to ``out/mean_p<row>.csv``; completed rows are reused when
    ``resume`` is set.
    """
    if seeds_per_point < 1:
        raise ValueError("seeds_per_point must be >= 1")
    config = config or SimConfig()
    design = np.atleast_2d(np.asarray(design, float))
    seeds = tuple(range(1, seeds_per_point + 1))
    m = len(design)
    means: list[MeanTrajectory | None] = [None] * m
    status = ["pending"] * m

    if out is None:
        for i, th in enumerate(design):
            means[i] = mean_of([_sim_or_raise(i, th, s, config) for s in seeds])
        return _assemble(design, seeds, means, config)

    out = Path(out)
    runs = out / RUNS_DIR
    runs.mkdir(parents=True, exist_ok=True)
    with open(out / CONFIG_FILE, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)

    if resume and (out / MANIFEST).exists():
        previous = {int(r["row_id"]): r for r in read_rows(out / MANIFEST)}
        for i in range(m):
            r = previous.get(i)
            same = r is not None and int(r["seed_count"]) == len(seeds) and all(
                float(r[n]) == float(design[i][j]) for j, n in enumerate(PARAM_NAMES))
            if not same:
                for p in runs.glob(f"traj_p{i}_s*.csv"):
                    p.unlink()
            elif r["status"] == "done" and (out / mean_filename(i)).exists():
                status[i] = "done"
    else:
        for p in runs.glob("*.csv"):
            p.unlink()
    _write_manifest(out, design, len(seeds), status)

    todo = [i for i in range(m) if status[i] != "done"]
    tasks = [(i, design[i], seeds, config, str(runs)) for i in todo]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_run_row, tasks, chunksize=max(1, len(tasks) // (4 * jobs)))
            _collect(results, out, design, len(seeds), status)
    else:
        _collect(map(_run_row, tasks), out, design, len(seeds), status)
    return load_design(out)


def _sim_or_raise(i, theta, seed, config):
    try:
        return run_simulation(SimParams.from_array(theta), seed, config)
    except Exception as exc:
        raise DesignError(f"simulation failed for row {i} theta={list(theta)} "
                          f"seed={seed}: {exc}") from exc


def _collect(results, out: Path, design, seed_count, status) -> None:
    done_since_flush = 0
    try:
        for row_id, mean in results:
            _write_mean(out / mean_filename(row_id), mean)
            status[row_id] = "done"
            done_since_flush += 1
            if done_since_flush >= 25:
                _write_manifest(out, design, seed_count, status)
                done_since_flush = 0
    finally:
        _write_manifest(out, design, seed_count, status)


def _assemble(design, seeds, means, config) -> DesignMatrix:
    hosp = np.vstack([mt.hosp_census for mt in means])
    deaths = np.vstack([mt.cum_deaths for mt in means])
    return DesignMatrix(np.asarray(design, float), tuple(seeds), hosp, deaths, config)


def load_design(path: str | Path) -> DesignMatrix:
    """Load a completed design directory written by :func:`run_design`."""
    path = Path(path)
    rows = read_rows(path / MANIFEST)
    if not rows:
        raise DesignError(f"empty design manifest in {path}")
    pending = [r["row_id"] for r in rows if r["status"] != "done"]
    if pending:
        raise DesignError(f"design in {path} has {len(pending)} unfinished rows; rerun with --resume")
    thetas = np.array([[float(r[n]) for n in PARAM_NAMES] for r in rows])
    seed_count = int(rows[0]["seed_count"])
    hosp, deaths = [], []
    for r in rows:
        data = np.loadtxt(path / mean_filename(int(r["row_id"])), delimiter=",", skiprows=1,
                          ndmin=2)
        hosp.append(data[:, 1])
        deaths.append(data[:, 2])
    config = SimConfig()
    if (path / CONFIG_FILE).exists():
        with open(path / CONFIG_FILE) as fh:
            config = SimConfig.from_dict(yaml.safe_load(fh))
    return DesignMatrix(thetas, tuple(range(1, seed_count + 1)), np.vstack(hosp),
                        np.vstack(deaths), config)
