"""Credible-interval coverage of theta* over replicate synthetic observations.

Reuses a finished pipeline run (its design-trained surrogate and importance
table) and, for each replicate, draws a fresh held-out seed set, synthesises
observations at theta*, calibrates, and records whether theta* falls inside
the central 95% interval of each parameter.

    python scripts/coverage_study.py --run /tmp/full_run --replicates 20
"""
import argparse
import tempfile
from pathlib import Path

import numpy as np

from abmcal.calibrate import (burn_in_length, calibrate, raftery_diagnostic,
                              read_observations)
from abmcal.pipeline import held_out_seeds, load_pipeline_config, synth_obs
from abmcal.surrogate import load_surrogate
from abmcal.util import derive_seed, read_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, required=True, help="finished pipeline run directory")
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--steps", type=int, default=None, help="override chain length")
    args = ap.parse_args()

    cfg = load_pipeline_config(args.run / "pipeline_config.yaml")
    model = load_surrogate(args.run / "model.bin")
    total = np.array([float(r["sobol_total"]) for r in read_rows(args.run / "importance.csv")])
    star = np.asarray(cfg.synthetic.theta_star)
    cal = cfg.calibration if args.steps is None else type(cfg.calibration)(
        **{**cfg.calibration.__dict__, "steps": args.steps})
    hits = []
    with tempfile.TemporaryDirectory() as tmp:
        for r in range(args.replicates):
            rep_seed = derive_seed(cfg.master_seed, "coverage", r)
            seeds = held_out_seeds(rep_seed, cfg.synthetic.n_seeds, cfg.design.seeds_per_point)
            path = Path(tmp) / f"obs{r}.csv"
            synth_obs(star, cfg.simulation, seeds, path, cfg.prior_box)
            obs = read_observations(path, cal.window, cal.centered)
            chain = calibrate(model, obs, None, cal, derive_seed(rep_seed, "calibrate"))
            try:
                burn = burn_in_length(raftery_diagnostic(chain))
            except ValueError:
                burn = 0
            lo, hi = np.percentile(chain.thetas[burn:], [2.5, 97.5], axis=0)
            inside = (star >= lo) & (star <= hi)
            hits.append(inside)
            print(f"rep {r:2d}: " + "  ".join(
                f"[{lo[j]:.4g}, {hi[j]:.4g}]{'' if inside[j] else '*'}" for j in range(len(star))),
                flush=True)
    hits = np.array(hits)
    print("coverage per parameter:", np.round(hits.mean(axis=0), 3).tolist())
    sensitive = total >= 0.1
    print("replicates with theta* covered for every parameter with S_T >= 0.1:",
          f"{int(hits[:, sensitive].all(axis=1).sum())}/{len(hits)}")


if __name__ == "__main__":
    main()
