"""Surrogate cross-validation error as a function of design size.

Builds (or resumes) a Halton design with the largest requested size and
runs the default grid search on its leading rows. Halton rows are nested,
so the first m rows of a large design equal a design of size m.

    python scripts/learning_curve.py --out /tmp/design700 --sizes 200 400 700
"""
import argparse
import time
from pathlib import Path

from abmcal.doe import generate_design, run_design
from abmcal.surrogate import DEFAULT_GRID, cv_search, expand_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True, help="design directory")
    ap.add_argument("--sizes", type=int, nargs="+", default=[200, 400, 700])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    t0 = time.perf_counter()
    D = run_design(generate_design(max(args.sizes)), args.seeds, None, args.out, args.jobs,
                   resume=True)
    print(f"design {len(D)}x{args.seeds} ready in {time.perf_counter() - t0:.0f}s")
    X, Y = D.thetas, D.outputs()
    grid = expand_grid(DEFAULT_GRID)
    for m in sorted(args.sizes):
        t0 = time.perf_counter()
        best, rep = cv_search(X[:m], Y[:m], grid, args.folds, seed=0)
        print(f"{m:5d} points: best CV error {rep.mean_scores()[rep.best_index]:.4f} "
              f"({best.criterion}, leaf {best.min_samples_leaf}, mf {best.max_features}) "
              f"in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
