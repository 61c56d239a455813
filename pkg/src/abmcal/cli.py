"""Command-line entry point: ``abmcal <subcommand> ...``.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 stage failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path


from .doe import DesignError, generate_design, load_prior_box, run_design
from .pipeline import (PipelineConfig, StageError, calibrate_stage, held_out_seeds,
                       importance_stage, load_pipeline_config, run_pipeline, synth_obs,
                       train_stage, validate_stage)
from .sim import ConfigError, SimParams, run_simulation, write_trajectory_csv
from .surrogate import load_grid
from .util import derive_seed

log = logging.getLogger("abmcal")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="pipeline YAML (simulation, prior box, settings)")
    p.add_argument("--master-seed", type=int, help="override the config's master seed")
    p.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
    p.add_argument("--out", type=Path, help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="abmcal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run MiniCity once")
    p.add_argument("--theta", type=float, nargs=4, required=True)
    p.add_argument("--seed", type=int, default=1)

    p = sub.add_parser("design", parents=[common], help="Halton design + mean-model runs")
    p.add_argument("--n-points", type=int, default=None, help="design points")
    p.add_argument("--seeds", type=int, default=None, help="seeds per point")
    p.add_argument("--prior-box", type=Path, help="YAML prior box (overrides the config's)")
    p.add_argument("--resume", action="store_true", help="reuse finished rows and runs in --out")

    p = sub.add_parser("train", parents=[common], help="CV search and surrogate fit")
    p.add_argument("--design", type=Path, required=True)
    p.add_argument("--grid", type=Path, help="YAML hyperparameter grid")
    p.add_argument("--variance", type=float, default=None, help="PCA variance threshold")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--cv-out", type=Path)

    p = sub.add_parser("importance", parents=[common], help="Gini/permutation/Sobol importances")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--design", type=Path, required=True)

    p = sub.add_parser("calibrate", parents=[common], help="DRAM calibration on the surrogate")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--obs", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("validate", parents=[common], help="pushforward scoring report")
    p.add_argument("--chain", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--obs", type=Path, required=True)
    p.add_argument("--abm", action="store_true", help="also push forward through MiniCity")
    p.add_argument("--np", dest="n_p", type=int, default=None)

    p = sub.add_parser("synth-obs", parents=[common], help="synthetic observations at theta*")
    p.add_argument("--theta", type=float, nargs=4, required=True)
    p.add_argument("--seeds", type=int, default=None, help="number of held-out seeds")

    sub.add_parser("pipeline", parents=[common], help="run every stage with a manifest")
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_pipeline_config(args.config)
    if args.master_seed is not None:
        cfg.master_seed = args.master_seed
    return cfg


def _need_out(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required")
    return args.out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError, DesignError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if not isinstance(exc, DesignError) else EXIT_STAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a stage failure
        print(f"error: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


def _dispatch(args) -> int:
    cfg = _config(args)
    cmd = args.command
    if cmd == "simulate":
        traj = run_simulation(SimParams.from_array(args.theta), args.seed, cfg.simulation)
        write_trajectory_csv(traj, _need_out(args))
    elif cmd == "design":
        n = args.n_points or cfg.design.n_points
        seeds = args.seeds or cfg.design.seeds_per_point
        box = load_prior_box(args.prior_box) if args.prior_box else cfg.prior_box
        D = run_design(generate_design(n, box), seeds, cfg.simulation, _need_out(args),
                       args.jobs, resume=args.resume)
        print(f"design with {len(D)} points x {seeds} seeds written to {args.out}")
    elif cmd == "train":
        settings = cfg.surrogate
        if args.folds is not None:
            settings = dataclasses.replace(settings, folds=args.folds)
        if args.variance is not None:
            settings = dataclasses.replace(settings, variance_threshold=args.variance)
        grid = load_grid(args.grid) if args.grid is not None else None
        out = _need_out(args)
        cv_out = args.cv_out or out.with_suffix(".cv.csv")
        train_stage(args.design, settings, cfg.prior_box, cfg.seed("train"), out, cv_out, grid)
        print(f"surrogate written to {out}; CV records in {cv_out}")
    elif cmd == "importance":
        out = _need_out(args)
        importance_stage(args.model, args.design, cfg.importance, cfg.seed("importance"), out,
                         out.with_name(out.stem + "_screen.csv"))
    elif cmd == "calibrate":
        cal = cfg.calibration
        if args.steps is not None:
            cal = dataclasses.replace(cal, steps=args.steps)
        seed = args.seed if args.seed is not None else cfg.seed("calibrate")
        out = _need_out(args)
        calibrate_stage(args.model, args.obs, cal, seed, out,
                        out.with_suffix(".summary.json"))
    elif cmd == "validate":
        settings = dataclasses.replace(cfg.validation, abm=args.abm or cfg.validation.abm,
                                       **({"n_p": args.n_p} if args.n_p else {}))
        abm_seeds = [derive_seed(cfg.master_seed, "validate-abm", i)
                     for i in range(settings.abm_seeds)]
        summary = validate_stage(args.chain, args.model, args.obs, settings, cfg.calibration,
                                 cfg.seed("validate"), _need_out(args), cfg.simulation, abm_seeds)
        print(json.dumps(summary, indent=2, sort_keys=True))
    elif cmd == "synth-obs":
        n = args.seeds or cfg.synthetic.n_seeds
        seeds = held_out_seeds(cfg.master_seed, n, cfg.design.seeds_per_point)
        truth = synth_obs(args.theta, cfg.simulation, seeds, _need_out(args), cfg.prior_box)
        if truth["degenerate"]:
            print("warning: observations are identically zero", file=sys.stderr)
    elif cmd == "pipeline":
        manifest = run_pipeline(cfg, _need_out(args), args.jobs)
        print(f"manifest {manifest.path} sha256 {manifest.digest()}")
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
