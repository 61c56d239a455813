"""Bootstrap-aggregated CART forest with a joint multi-output prediction."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import cached_property

import numba as nb
import numpy as np

from .tree import CRITERIA, Tree, fit_tree


@dataclass(frozen=True)
class Hyperparams:
    n_trees: int = 500
    criterion: str = "absolute_error"
    min_samples_leaf: int = 3
    max_features: int = 5
    max_depth: int | None = None
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1 or self.min_samples_leaf < 1 or self.max_features < 1:
            raise ValueError(f"hyperparameter counts must be >= 1: {self}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown split criterion {self.criterion!r}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def clamp(self, n_features: int) -> "Hyperparams":
        """Copy with ``max_features`` limited to the input dimension."""
        if self.max_features <= n_features:
            return self
        return Hyperparams(**{**asdict(self), "max_features": n_features})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RandomForest:
    trees: list[Tree]
    hyperparams: Hyperparams
    n_features: int
    bootstrap_idx: list[np.ndarray] = field(default_factory=list)
    oob_idx: list[np.ndarray] = field(default_factory=list)

    @property
    def n_outputs(self) -> int:
        return self.trees[0].n_outputs

    @cached_property
    def _packed(self):
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        feature = np.concatenate([t.feature for t in self.trees])
        threshold = np.concatenate([t.threshold for t in self.trees])
        left = np.concatenate([t.left + o for t, o in zip(self.trees, offsets)])
        right = np.concatenate([t.right + o for t, o in zip(self.trees, offsets)])
        value = np.ascontiguousarray(np.vstack([t.value for t in self.trees]))
        return offsets[:-1].astype(np.int64), feature, threshold, left, right, value

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Per-output mean of the tree predictions, shape (rows, outputs)."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _predict_forest(*self._packed, X)

    def predict_per_tree(self, X: np.ndarray) -> np.ndarray:
        """Tree predictions stacked as (trees, rows, outputs)."""
        return np.stack([t.predict(X) for t in self.trees])

    def features_used(self) -> set[int]:
        return {int(f) for t in self.trees for f in t.feature if f >= 0}


@nb.njit(cache=True)
def _predict_forest(roots, feature, threshold, left, right, value, X):
    n_rows = X.shape[0]
    k = value.shape[1]
    out = np.zeros((n_rows, k))
    for r in range(n_rows):
        for t in range(len(roots)):
            node = roots[t]
            while feature[node] >= 0:
                if X[r, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            for j in range(k):
                out[r, j] += value[node, j]
    return out / len(roots)


def fit_forest(X: np.ndarray, Y: np.ndarray, hp: Hyperparams | None = None,
               seed: int = 0) -> RandomForest:
    """Fit ``hp.n_trees`` trees on independent bootstrap resamples.

    Tree ``i`` draws its bootstrap sample and feature keys from child ``i``
    of ``SeedSequence(seed)``, so the forest is a pure function of
    (data, hyperparameters, seed).
    """
    hp = hp or Hyperparams()
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    m, p = X.shape
    hp = hp.clamp(p)
    trees, boots, oobs = [], [], []
    for child in np.random.SeedSequence(seed).spawn(hp.n_trees):
        rng = np.random.default_rng(child)
        if hp.bootstrap:
            idx = np.sort(rng.integers(0, m, size=m))
        else:
            idx = np.arange(m)
        tree_seed = int(rng.integers(0, 2**63 - 1))
        trees.append(fit_tree(X, Y, hp.criterion, hp.min_samples_leaf, hp.max_features,
                              hp.max_depth, tree_seed, sample_idx=idx))
        boots.append(idx)
        oobs.append(np.setdiff1d(np.arange(m), idx))
    return RandomForest(trees, hp, p, boots, oobs)
