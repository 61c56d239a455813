"""Brute-force k-fold search over forest hyperparameters."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .forest import Hyperparams, fit_forest
from .model import median_abs_rel_error
from .pca import pca_fit, pca_project, pca_reconstruct


@dataclass
class CvReport:
    grid: list[Hyperparams]
    # (grid index, fold, error) per evaluation
    records: list[tuple[int, int, float]] = field(default_factory=list)
    folds: list[np.ndarray] = field(default_factory=list)

    def mean_scores(self) -> np.ndarray:
        scores = np.zeros(len(self.grid))
        counts = np.zeros(len(self.grid))
        for g, _, err in self.records:
            scores[g] += err
            counts[g] += 1
        return scores / np.maximum(counts, 1)

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.mean_scores()))

    def rows(self):
        for g, fold, err in self.records:
            yield {**self.grid[g].to_dict(), "grid_index": g, "fold": fold, "error": err}


def fold_indices(m: int, folds: int, seed: int) -> list[np.ndarray]:
    if folds < 2:
        raise ValueError("need at least two folds")
    if m < folds:
        raise ValueError(f"{m} samples cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(m)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def cv_search(X: np.ndarray, Y: np.ndarray, grid: list[Hyperparams], folds: int = 5,
              seed: int = 0, variance_threshold: float = 0.95,
              floor: float | None = None) -> tuple[Hyperparams, CvReport]:
    """Pick the grid point with the lowest mean held-out error.

    ``Y`` holds full trajectories (m x 2n). Inside each fold the PCA basis is
    refit on the training rows and the error is the median absolute relative
    error of the reconstructed held-out trajectories.
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    parts = fold_indices(len(X), folds, seed)
    report = CvReport(list(grid), folds=parts)
    kw = {} if floor is None else {"floor": floor}
    for f, test in enumerate(parts):
        train = np.setdiff1d(np.arange(len(X)), test)
        basis = pca_fit(Y[train], variance_threshold)
        alpha = pca_project(basis, Y[train])
        fold_seed = int(np.random.SeedSequence([seed, f]).generate_state(1)[0])
        for g, hp in enumerate(grid):
            if basis.k == 0:
                pred = np.tile(basis.mean, (len(test), 1))
            else:
                forest = fit_forest(X[train], alpha, hp, fold_seed)
                pred = pca_reconstruct(basis, forest.predict(X[test]))
            report.records.append((g, f, median_abs_rel_error(pred, Y[test], **kw)))
    return grid[report.best_index], report


def expand_grid(spec: dict) -> list[Hyperparams]:
    """Cartesian product of ``{name: [values...]}`` into hyperparameter sets."""
    names = list(spec)
    values = [v if isinstance(v, (list, tuple)) else [v] for v in spec.values()]
    return [Hyperparams(**dict(zip(names, combo))) for combo in itertools.product(*values)]


def load_grid(path: str | Path) -> list[Hyperparams]:
    """Read a YAML grid: either a list of hyperparameter mappings or a mapping of lists."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if isinstance(data, dict) and "grid" in data:
        data = data["grid"]
    if isinstance(data, dict):
        return expand_grid(data)
    return [Hyperparams(**d) for d in data]


# scaled-down version of the tuned setting (500 trees, absolute error,
# 3 samples per leaf, up to 5 features) with neighbours for the search
DEFAULT_GRID = {
    "n_trees": [500],
    "criterion": ["absolute_error", "squared_error"],
    "min_samples_leaf": [1, 3, 5],
    "max_features": [2, 5],
}
