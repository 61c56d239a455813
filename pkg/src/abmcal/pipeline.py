"""End-to-end pipeline: synthetic observations, design, training, importance, calibration, validation.

Each stage declares its inputs, parameters and outputs. The run directory
holds ``pipeline_manifest.json`` with content hashes of all three; a stage
whose recorded hashes still match is skipped. All stage seeds are derived
from one master seed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .calibrate import (CalibrationConfig, burn_in_length, calibrate, raftery_diagnostic,
                        read_chain, read_observations, write_observations)
from .doe import DEFAULT_PRIOR_BOX, PriorBox, generate_design, load_design, run_design
from .sensitivity import importance_report, screen_parameters
from .sim import ConfigError, SimConfig, SimParams, run_mean_model
from .surrogate import (DEFAULT_GRID, Hyperparams, cv_search, expand_grid, load_surrogate,
                        save_surrogate, train_surrogate)
from .util import derive_seed, file_sha256, write_rows
from .validate import AbmMeanModel, plot_fans, validate_chain

log = logging.getLogger(__name__)

MANIFEST_FILE = "pipeline_manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, hint: str = ""):
        super().__init__(f"stage {stage!r} failed: {message}" + (f"\n{hint}" if hint else ""))
        self.stage = stage


# ---- configuration -------------------------------------------------------------

@dataclass
class DesignSettings:
    n_points: int = 200
    seeds_per_point: int = 10


@dataclass
class SurrogateSettings:
    variance_threshold: float = 0.95
    folds: int = 5
    grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))


@dataclass
class ImportanceSettings:
    measure: str = "gini"
    k: int = 4
    repeats: int = 5
    n_base: int = 1024


@dataclass
class ValidationSettings:
    n_p: int = 500
    abm: bool = False
    abm_n_p: int = 100
    abm_seeds: int = 50


@dataclass
class SyntheticSettings:
    theta_star: list[float] | None = None
    n_seeds: int = 10


@dataclass
class PipelineConfig:
    master_seed: int = 0
    simulation: SimConfig = field(default_factory=SimConfig)
    prior_box: PriorBox = DEFAULT_PRIOR_BOX
    design: DesignSettings = field(default_factory=DesignSettings)
    surrogate: SurrogateSettings = field(default_factory=SurrogateSettings)
    importance: ImportanceSettings = field(default_factory=ImportanceSettings)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    # overrides the seed derived from master_seed
    calibration_seed: int | None = None
    validation: ValidationSettings = field(default_factory=ValidationSettings)
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    # external observation CSV, used when no synthetic truth is configured
    observations: str | None = None

    _SECTIONS = {"design": DesignSettings, "surrogate": SurrogateSettings,
                 "importance": ImportanceSettings, "validation": ValidationSettings,
                 "synthetic": SyntheticSettings}

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data or {})
        known = {"master_seed", "simulation", "prior_box", "calibration", "calibration_seed",
                 "observations", *cls._SECTIONS}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        kw = {}
        try:
            for key, typ in cls._SECTIONS.items():
                if key in data:
                    kw[key] = typ(**(data[key] or {}))
            if "simulation" in data:
                kw["simulation"] = SimConfig.from_dict(data["simulation"] or {})
            if "prior_box" in data:
                kw["prior_box"] = PriorBox.from_dict(data["prior_box"])
            if "calibration" in data:
                kw["calibration"] = CalibrationConfig.from_dict(data["calibration"] or {})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid pipeline config: {exc}") from exc
        for key in ("master_seed", "calibration_seed", "observations"):
            if key in data:
                kw[key] = data[key]
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.importance.measure not in ("gini", "permutation", "sobol_first", "sobol_total"):
            raise ConfigError(f"unknown importance measure {self.importance.measure!r}")
        if self.synthetic.theta_star is not None:
            th = np.asarray(self.synthetic.theta_star, float)
            if th.shape != (self.prior_box.dim,) or not self.prior_box.contains(th):
                raise ConfigError(f"theta_star {list(th)} must lie inside the prior box")
        elif self.observations is None:
            raise ConfigError("configure either synthetic.theta_star or observations")
        if self.design.n_points < 2 or self.design.seeds_per_point < 1:
            raise ConfigError("design needs >= 2 points and >= 1 seed per point")

    def to_dict(self) -> dict:
        out = {k: asdict(getattr(self, k)) for k in self._SECTIONS}
        out.update(master_seed=self.master_seed, simulation=self.simulation.to_dict(),
                   prior_box=self.prior_box.to_dict(), calibration=self.calibration.to_dict(),
                   calibration_seed=self.calibration_seed, observations=self.observations)
        return out

    def seed(self, stage: str) -> int:
        if stage == "calibrate" and self.calibration_seed is not None:
            return int(self.calibration_seed)
        return derive_seed(self.master_seed, stage)


def load_pipeline_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig(synthetic=SyntheticSettings(theta_star=default_theta_star()))
    with open(path) as fh:
        return PipelineConfig.from_dict(yaml.safe_load(fh))


def default_theta_star(box: PriorBox = DEFAULT_PRIOR_BOX) -> list[float]:
    return [float(x) for x in box.scale(np.full(box.dim, 0.5))]


# ---- hashing and manifest ---------------------------------------------------------

def content_hash(path: Path) -> str:
    """SHA-256 of a file, or of the sorted (relative path, file hash) list of a directory."""
    if path.is_file():
        return file_sha256(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(f"{p.relative_to(path).as_posix()}\0{file_sha256(p)}\n".encode())
    return h.hexdigest()


def params_hash(params: dict) -> str:
    return hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()


@dataclass
class Stage:
    name: str
    inputs: dict[str, Path]
    params: dict
    outputs: dict[str, Path]
    run: Callable[[], None]


class Manifest:
    def __init__(self, root: Path):
        self.root = root
        self.path = root / MANIFEST_FILE
        self.data = {"stages": {}}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())

    def rel(self, p: Path) -> str:
        try:
            return p.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return p.name

    def entry(self, stage: Stage) -> dict:
        return {
            "params": params_hash(stage.params),
            "inputs": {k: content_hash(p) for k, p in sorted(stage.inputs.items())},
            "outputs": {k: content_hash(p) for k, p in sorted(stage.outputs.items())},
            "paths": {k: self.rel(p) for k, p in sorted(stage.outputs.items())},
        }

    def up_to_date(self, stage: Stage) -> bool:
        old = self.data["stages"].get(stage.name)
        if old is None or not all(p.exists() for p in stage.outputs.values()):
            return False
        return old == self.entry(stage)

    def record(self, stage: Stage) -> None:
        self.data["stages"][stage.name] = self.entry(stage)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, sort_keys=True, indent=2) + "\n")
        tmp.replace(self.path)

    def digest(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()


# ---- stages ---------------------------------------------------------------------

def synth_obs(theta_star, config: SimConfig, seeds, out: str | Path,
              box: PriorBox = DEFAULT_PRIOR_BOX) -> dict:
    """Mean-model observations at ``theta_star`` over held-out ``seeds``, plus a truth sidecar."""
    theta = np.asarray(theta_star, float)
    if not box.contains(theta):
        raise ConfigError(f"theta_star {list(theta)} lies outside the prior box")
    m = run_mean_model(SimParams.from_array(theta), list(seeds), config)
    out = Path(out)
    write_observations(out, m.hosp_census, m.cum_deaths)
    truth = {"theta_star": [float(x) for x in theta], "seeds": [int(s) for s in seeds],
             "degenerate": bool(not np.any(m.hosp_census) and not np.any(m.cum_deaths))}
    if truth["degenerate"]:
        log.warning("synthetic observations are identically zero")
    truth_path(out).write_text(json.dumps(truth, sort_keys=True, indent=2) + "\n")
    return truth


def truth_path(obs_path: Path) -> Path:
    return obs_path.with_suffix(".truth.json")


def held_out_seeds(master_seed: int, n: int, exclude: int) -> list[int]:
    """Seeds for synthetic truth, disjoint from the design seeds 1..exclude."""
    seeds, i = [], 0
    while len(seeds) < n:
        s = derive_seed(master_seed, "synth-obs", i)
        if s > exclude:
            seeds.append(s)
        i += 1
    return seeds


def train_stage(design_dir: Path, settings: SurrogateSettings, box: PriorBox, seed: int,
                model_path: Path, cv_path: Path, grid: list[Hyperparams] | None = None) -> None:
    D = load_design(design_dir)
    X, Y = D.thetas, D.outputs()
    grid = grid if grid is not None else expand_grid(settings.grid)
    hp, report = cv_search(X, Y, grid, settings.folds, seed, settings.variance_threshold)
    rows = list(report.rows())
    keys = list(rows[0])
    write_rows(cv_path, keys, ([r[k] for k in keys] for r in rows))
    model = train_surrogate(X, Y, hp, settings.variance_threshold, seed, box)
    model.meta["cv_error"] = float(report.mean_scores()[report.best_index])
    save_surrogate(model, model_path)


def importance_stage(model_path: Path, design_dir: Path, settings: ImportanceSettings,
                     seed: int, out: Path, screen_out: Path) -> None:
    model = load_surrogate(model_path)
    D = load_design(design_dir)
    rep = importance_report(model, D.thetas, D.outputs(), model.box, None, settings.repeats,
                            settings.n_base, seed)
    rep.write_csv(out)
    chosen = set(screen_parameters(rep, min(settings.k, len(rep.names)), settings.measure))
    ranked = [i for i in rep.ranking(settings.measure) if i in chosen]
    write_rows(screen_out, ["rank", "feature", "index"],
               ([r + 1, rep.names[i], i] for r, i in enumerate(ranked)))


def calibrate_stage(model_path: Path, obs_path: Path, cfg: CalibrationConfig, seed: int,
                    chain_path: Path, summary_path: Path | None = None) -> None:
    model = load_surrogate(model_path)
    obs = read_observations(obs_path, cfg.window, cfg.centered)
    chain = calibrate(model, obs, None, cfg, seed)
    chain.write_csv(chain_path)
    if summary_path is not None:
        summary = dict(chain.meta)
        summary["acceptance_rate"] = chain.acceptance_rate
        try:
            diag = raftery_diagnostic(chain)
            summary["raftery_lewis"] = [asdict(d) for d in diag]
            summary["burn_in"] = burn_in_length(diag)
        except ValueError as exc:
            summary["raftery_lewis"] = str(exc)
        summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2, default=float) + "\n")


def validate_stage(chain_path: Path, model_path: Path, obs_path: Path, settings: ValidationSettings,
                   cal: CalibrationConfig, seed: int, out: Path, sim: SimConfig | None = None,
                   abm_seeds: list[int] | None = None) -> dict:
    model = load_surrogate(model_path)
    obs = read_observations(obs_path, cal.window, cal.centered)
    chain = read_chain(chain_path)
    out.mkdir(parents=True, exist_ok=True)
    res = validate_chain(chain, model, obs, model.box, settings.n_p, seed, "surrogate")
    res.report.write(out)
    plot_fans(res, obs, out)
    summary = {"crps_posterior": {o: res.report.crps_mean(o) for o in ("hosp", "deaths")},
               "crps_prior": res.report.extra["crps_mean_prior"]}
    if settings.abm:
        abm = AbmMeanModel(sim or SimConfig(), abm_seeds or list(range(1, settings.abm_seeds + 1)))
        res_abm = validate_chain(chain, abm, obs, model.box, settings.abm_n_p, seed, "abm",
                                 burn_in=res.burn_in)
        res_abm.report.write(out / "abm")
        plot_fans(res_abm, obs, out / "abm")
    return summary


def build_stages(cfg: PipelineConfig, root: Path, jobs: int = 1) -> list[Stage]:
    design_dir = root / "design"
    model = root / "model.bin"
    cv = root / "cv.csv"
    importance = root / "importance.csv"
    screen = root / "screen.csv"
    chain = root / "chain.csv"
    cal_summary = root / "calibration.json"
    report = root / "report"
    stages = []

    if cfg.synthetic.theta_star is not None:
        obs = root / "obs.csv"
        seeds = held_out_seeds(cfg.master_seed, cfg.synthetic.n_seeds,
                               cfg.design.seeds_per_point)
        stages.append(Stage(
            "synth-obs", {}, {"theta_star": cfg.synthetic.theta_star, "seeds": seeds,
                              "simulation": cfg.simulation.to_dict(),
                              "box": cfg.prior_box.to_dict()},
            {"obs": obs, "truth": truth_path(obs)},
            lambda: synth_obs(cfg.synthetic.theta_star, cfg.simulation, seeds, obs,
                              cfg.prior_box)))
    else:
        obs = Path(cfg.observations)

    def run_design_stage():
        if design_dir.exists():
            shutil.rmtree(design_dir)
        run_design(generate_design(cfg.design.n_points, cfg.prior_box),
                   cfg.design.seeds_per_point, cfg.simulation, design_dir, jobs)

    stages.append(Stage("design", {}, {"design": asdict(cfg.design),
                                       "simulation": cfg.simulation.to_dict(),
                                       "box": cfg.prior_box.to_dict()},
                        {"design": design_dir}, run_design_stage))
    seed = cfg.seed("train")
    stages.append(Stage("train", {"design": design_dir},
                        {"surrogate": asdict(cfg.surrogate), "seed": seed,
                         "box": cfg.prior_box.to_dict()},
                        {"model": model, "cv": cv},
                        lambda: train_stage(design_dir, cfg.surrogate, cfg.prior_box,
                                            cfg.seed("train"), model, cv)))
    stages.append(Stage("importance", {"model": model, "design": design_dir},
                        {"importance": asdict(cfg.importance), "seed": cfg.seed("importance")},
                        {"importance": importance, "screen": screen},
                        lambda: importance_stage(model, design_dir, cfg.importance,
                                                 cfg.seed("importance"), importance, screen)))
    stages.append(Stage("calibrate", {"model": model, "obs": obs},
                        {"calibration": cfg.calibration.to_dict(), "seed": cfg.seed("calibrate")},
                        {"chain": chain, "summary": cal_summary},
                        lambda: calibrate_stage(model, obs, cfg.calibration,
                                                cfg.seed("calibrate"), chain, cal_summary)))
    abm_seeds = [derive_seed(cfg.master_seed, "validate-abm", i)
                 for i in range(cfg.validation.abm_seeds)]

    def run_validate():
        if report.exists():
            shutil.rmtree(report)
        validate_stage(chain, model, obs, cfg.validation, cfg.calibration,
                       cfg.seed("validate"), report, cfg.simulation, abm_seeds)

    stages.append(Stage("validate", {"chain": chain, "model": model, "obs": obs},
                        {"validation": asdict(cfg.validation), "seed": cfg.seed("validate"),
                         "window": cfg.calibration.window, "centered": cfg.calibration.centered,
                         "simulation": cfg.simulation.to_dict()},
                        {"report": report}, run_validate))
    return stages


def run_pipeline(cfg: PipelineConfig, root: str | Path, jobs: int = 1,
                 echo: Callable[[str], None] = print) -> Manifest:
    """Run every stage in order, skipping those whose manifest entry is current."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "pipeline_config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    manifest = Manifest(root)
    for stage in build_stages(cfg, root, jobs):
        missing = [k for k, p in stage.inputs.items() if not p.exists()]
        if missing:
            raise StageError(stage.name, f"missing inputs {missing}",
                             "check the configured paths and rerun `abmcal pipeline`")
        if manifest.up_to_date(stage):
            echo(f"[{stage.name}] up to date")
            continue
        echo(f"[{stage.name}] running")
        try:
            stage.run()
        except ConfigError:
            raise
        except Exception as exc:
            raise StageError(stage.name, f"{type(exc).__name__}: {exc}",
                             f"inputs: {sorted(stage.inputs)}; fix the cause and rerun the same "
                             f"`abmcal pipeline` command to resume from this stage") from exc
        manifest.record(stage)
    return manifest
