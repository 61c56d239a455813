"""Feature importance of the forest surrogate and 9 -> 4 style parameter screening."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .doe import FIRST_PRIMES, PriorBox, halton
from .surrogate.forest import RandomForest
from .surrogate.model import median_abs_rel_error
from .util import write_rows

log = logging.getLogger(__name__)

MIN_SOBOL_BASE = 256


def gini_importance(forest: RandomForest) -> np.ndarray:
    """Impurity decrease per feature, weighted by node sample share, summing to 1.

    Each tree contributes ``(S_node - S_left - S_right) / n_root`` for every
    split, where ``S`` is the criterion summed over the node's samples. The
    per-tree vectors are averaged and normalised. A forest without splits
    gives all zeros.
    """
    p = forest.n_features
    total = np.zeros(p)
    for t in forest.trees:
        contrib = np.zeros(p)
        split = np.flatnonzero(t.feature >= 0)
        if len(split):
            dec = t.impurity[split] - t.impurity[t.left[split]] - t.impurity[t.right[split]]
            np.add.at(contrib, t.feature[split], np.maximum(dec, 0.0))
            contrib /= t.n_samples[0]
        total += contrib
    total /= len(forest.trees)
    s = total.sum()
    return total / s if s > 0 else total


@dataclass
class PermutationResult:
    importances: np.ndarray        # (p,) mean error increase
    values: np.ndarray             # (repeats, p)
    baseline: float


def _as_predict(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "predict_concat"):
        return model.predict_concat
    if hasattr(model, "predict"):
        return model.predict
    return model


def permutation_importance(model, X: np.ndarray, Y: np.ndarray, repeats: int = 5,
                           seed: int = 0,
                           error: Callable[[np.ndarray, np.ndarray], float] = median_abs_rel_error
                           ) -> PermutationResult:
    """Mean increase of ``error`` when one input column is shuffled.

    ``model`` is a forest, a surrogate (scored on reconstructed trajectories)
    or any callable ``X -> predictions``. The permutation for (repeat r,
    feature j) comes from ``SeedSequence([seed, r, j])``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    raw = _as_predict(model)
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.asarray(Y, float)
    if Y.ndim == 1:
        Y = Y[:, None]

    def predict(Xq):
        return np.asarray(raw(Xq), float).reshape(Y.shape)

    base = error(predict(X), Y)
    values = np.zeros((repeats, X.shape[1]))
    for r in range(repeats):
        for j in range(X.shape[1]):
            perm = np.random.default_rng(np.random.SeedSequence([seed, r, j])).permutation(len(X))
            Xp = X.copy()
            Xp[:, j] = X[perm, j]
            values[r, j] = error(predict(Xp), Y) - base
    return PermutationResult(values.mean(axis=0), values, base)


@dataclass
class SobolResult:
    first: np.ndarray
    total: np.ndarray
    first_half_width: np.ndarray
    total_half_width: np.ndarray
    variance: float
    n_evaluations: int
    flagged: bool = False


def saltelli_sample(n_base: int, box: PriorBox, start: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Base matrices A and B from one 2p-dimensional Halton block."""
    p = box.dim
    u = halton(n_base, FIRST_PRIMES[:2 * p], start=start)
    return box.scale(u[:, :p]), box.scale(u[:, p:])


def _indices(fA, fB, fAB, fBA):
    """First and total indices from evaluations shaped (N, k) and (p, N, k)."""
    V = np.concatenate([fA, fB]).var(axis=0).sum()
    if not V > 0:
        return None
    first = 0.5 * (np.mean(fB * (fAB - fA), axis=1) + np.mean(fA * (fBA - fB), axis=1))
    total = 0.25 * (np.mean((fA - fAB) ** 2, axis=1) + np.mean((fB - fBA) ** 2, axis=1))
    return first.sum(axis=-1) / V, total.sum(axis=-1) / V


def sobol_indices(predict: Callable[[np.ndarray], np.ndarray], box: PriorBox,
                  n_base: int = 1024, seed: int = 0, n_boot: int = 200,
                  halton_start: int = 1) -> SobolResult:
    """Saltelli pick-freeze estimate of first-order and total Sobol indices.

    Uses 2 * n_base * (p + 1) model evaluations: A, B, A with column i from
    B, and B with column i from A, for each input i. First-order indices use
    the Saltelli (2010) estimator and total indices the Jansen estimator,
    both symmetrised over the (A, B) roles. Vector outputs are combined by
    weighting each output's index by its variance. Confidence half-widths
    are half the 95% bootstrap percentile range over resampled rows.
    """
    if n_base < MIN_SOBOL_BASE:
        raise ValueError(f"n_base must be >= {MIN_SOBOL_BASE}")
    A, B = saltelli_sample(n_base, box, halton_start)
    p = box.dim
    AB = np.repeat(A[None], p, axis=0)
    BA = np.repeat(B[None], p, axis=0)
    for i in range(p):
        AB[i, :, i] = B[:, i]
        BA[i, :, i] = A[:, i]
    X = np.concatenate([A, B, AB.reshape(-1, p), BA.reshape(-1, p)])
    f = np.asarray(predict(X), float)
    if f.ndim == 1:
        f = f[:, None]
    N = n_base
    fA, fB = f[:N], f[N:2 * N]
    fAB = f[2 * N:2 * N + p * N].reshape(p, N, -1)
    fBA = f[2 * N + p * N:].reshape(p, N, -1)
    est = _indices(fA, fB, fAB, fBA)
    if est is None:
        nan = np.full(p, np.nan)
        return SobolResult(nan, nan.copy(), nan.copy(), nan.copy(), 0.0, len(X), flagged=True)
    first, total = est
    rng = np.random.default_rng(seed)
    boot_first, boot_total = [], []
    for _ in range(n_boot):
        r = rng.integers(0, N, N)
        b = _indices(fA[r], fB[r], fAB[:, r], fBA[:, r])
        if b is not None:
            boot_first.append(b[0])
            boot_total.append(b[1])
    def half_width(samples):
        if not samples:
            return np.full(p, np.nan)
        lo, hi = np.percentile(np.array(samples), [2.5, 97.5], axis=0)
        return (hi - lo) / 2
    V = float(np.concatenate([fA, fB]).var(axis=0).sum())
    return SobolResult(first, total, half_width(boot_first), half_width(boot_total), V, len(X))


@dataclass
class ImportanceReport:
    names: list[str]
    gini: np.ndarray
    permutation: np.ndarray
    sobol_first: np.ndarray
    sobol_total: np.ndarray
    extra: dict = field(default_factory=dict)

    MEASURES = ("gini", "permutation", "sobol_first", "sobol_total")

    def measure(self, name: str) -> np.ndarray:
        if name not in self.MEASURES:
            raise ValueError(f"unknown importance measure {name!r}")
        return np.asarray(getattr(self, name), float)

    def ranking(self, name: str = "gini") -> list[int]:
        """Feature indices by decreasing importance, ties to the lower index."""
        values = self.measure(name)
        return sorted(range(len(values)), key=lambda i: (-values[i], i))

    def write_csv(self, path) -> None:
        write_rows(path, ["feature", *self.MEASURES],
                   ([n, float(g), float(pm), float(sf), float(st)] for n, g, pm, sf, st in
                    zip(self.names, self.gini, self.permutation, self.sobol_first,
                        self.sobol_total)))


def screen_parameters(report: ImportanceReport, k: int, measure: str = "gini") -> list[int]:
    """Sorted indices of the ``k`` most important features under ``measure``.

    Ties at the cut go to the lower feature index; ``report.ranking`` gives
    the full order.
    """
    if not 0 <= k <= len(report.names):
        raise ValueError(f"cannot select {k} of {len(report.names)} features")
    return sorted(report.ranking(measure)[:k])


def importance_report(surrogate, X: np.ndarray, Y: np.ndarray, box: PriorBox,
                      names: Sequence[str] | None = None, repeats: int = 5,
                      n_base: int = 1024, seed: int = 0) -> ImportanceReport:
    """All four measures for a trained surrogate.

    Permutation importance is scored on reconstructed trajectories with the
    median absolute relative error; Sobol indices use the retained PCA
    coefficients as a vector output (variance-weighted).
    """
    names = list(names or box.names)
    if surrogate.forest is None:
        zeros = np.zeros(box.dim)
        return ImportanceReport(names, zeros, zeros.copy(), zeros.copy(), zeros.copy(),
                                {"flagged": True})
    gini = gini_importance(surrogate.forest)
    perm = permutation_importance(surrogate, X, Y, repeats, seed)
    sob = sobol_indices(surrogate.coefficients, box, n_base, seed)
    return ImportanceReport(names, gini, perm.importances, sob.first, sob.total,
                            {"sobol_first_hw": sob.first_half_width,
                             "sobol_total_hw": sob.total_half_width,
                             "flagged": sob.flagged})
