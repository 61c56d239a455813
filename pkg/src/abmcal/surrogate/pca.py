"""PCA of temporally concatenated (hospital census, cumulative deaths) series."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PcaBasis:
    mean: np.ndarray                      # (2n,)
    components: np.ndarray                # (r, 2n), all computed components, orthonormal rows
    explained_variance: np.ndarray        # (r,)
    explained_variance_ratio: np.ndarray  # (r,)
    k: int                                # retained count

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def retained(self) -> np.ndarray:
        return self.components[:self.k]

    def cumulative_ratio(self) -> np.ndarray:
        return np.cumsum(self.explained_variance_ratio)

    def truncated(self, k: int) -> "PcaBasis":
        if not 0 <= k <= len(self.components):
            raise ValueError(f"k={k} outside [0, {len(self.components)}]")
        return PcaBasis(self.mean, self.components, self.explained_variance,
                        self.explained_variance_ratio, k)


def n_components_for(ratios: np.ndarray, threshold: float) -> int:
    """Smallest count whose cumulative explained-variance ratio reaches ``threshold``."""
    cum = np.cumsum(ratios)
    # tolerance keeps threshold=1.0 reachable despite rounding in the cumsum
    hits = np.flatnonzero(cum >= threshold - 1e-12)
    return int(hits[0]) + 1 if len(hits) else len(ratios)


def pca_fit(data: np.ndarray, variance_threshold: float = 0.95,
            n_components: int | None = None) -> PcaBasis:
    """Fit PCA by thin SVD of the column-centred data (no standardisation).

    ``n_components`` overrides the variance threshold when given.
    """
    X = np.asarray(data, float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca_fit needs a 2-D array with at least two rows")
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError("variance_threshold must lie in (0, 1]")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    ev = s ** 2 / (X.shape[0] - 1)
    total = ev.sum()
    scale = max(np.abs(X).max(), 1.0)
    if total <= (1e-13 * scale) ** 2 * X.size:
        return PcaBasis(mean, np.empty((0, X.shape[1])), np.empty(0), np.empty(0), 0)
    # deterministic sign: largest-magnitude loading of each component is positive
    pivot = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), pivot])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    ratio = ev / total
    if n_components is not None:
        k = int(n_components)
        if not 0 <= k <= len(vt):
            raise ValueError(f"n_components={k} outside [0, {len(vt)}]")
    else:
        k = n_components_for(ratio, variance_threshold)
    return PcaBasis(mean, vt, ev, ratio, k)


def pca_project(basis: PcaBasis, row: np.ndarray) -> np.ndarray:
    """Coefficients of ``row`` (or rows) on the retained components."""
    row = np.asarray(row, float)
    if row.shape[-1] != basis.dim:
        raise ValueError(f"row length {row.shape[-1]} != basis dimension {basis.dim}")
    return (row - basis.mean) @ basis.retained.T


def pca_reconstruct(basis: PcaBasis, alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, float)
    if alpha.shape[-1] != basis.k:
        raise ValueError(f"alpha length {alpha.shape[-1]} != retained count {basis.k}")
    return basis.mean + alpha @ basis.retained
