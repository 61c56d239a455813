"""PCA + random-forest surrogate: prediction, accuracy metric, persistence."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..doe import DEFAULT_PRIOR_BOX, DesignMatrix, PriorBox
from .forest import Hyperparams, RandomForest, fit_forest
from .pca import PcaBasis, pca_fit, pca_project, pca_reconstruct
from .tree import Tree

MAGIC = b"ABMCALSM"
FORMAT_VERSION = 1

# entries below this magnitude (in counts) are left out of relative errors
REL_ERROR_FLOOR = 1.0


def median_abs_rel_error(pred: np.ndarray, true: np.ndarray,
                         floor: float = REL_ERROR_FLOOR) -> float:
    """Median of |pred - true| / |true| over entries with |true| >= floor."""
    pred = np.asarray(pred, float)
    true = np.asarray(true, float)
    mask = np.abs(true) >= floor
    if not mask.any():
        return float("nan")
    return float(np.median(np.abs(pred[mask] - true[mask]) / np.abs(true[mask])))


class SurrogatePrediction(NamedTuple):
    hosp: np.ndarray
    deaths: np.ndarray
    extrapolated: bool


@dataclass
class Surrogate:
    basis: PcaBasis
    forest: RandomForest | None
    box: PriorBox = DEFAULT_PRIOR_BOX
    meta: dict = field(default_factory=dict)
    # training inputs and concatenated outputs, kept for the OLS start point
    train_thetas: np.ndarray | None = None
    train_outputs: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.basis.dim // 2

    def coefficients(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, float))
        if self.basis.k == 0 or self.forest is None:
            return np.zeros((len(thetas), 0))
        return self.forest.predict(thetas)

    def predict_concat(self, thetas: np.ndarray) -> np.ndarray:
        """Reconstructed (hosp, deaths) concatenation for each row of ``thetas``."""
        return pca_reconstruct(self.basis, self.coefficients(thetas))

    def predict(self, theta: np.ndarray) -> SurrogatePrediction:
        theta = np.asarray(theta, float)
        y = self.predict_concat(theta)[0]
        n = self.horizon
        return SurrogatePrediction(y[:n], y[n:], not self.box.contains(theta))

    def __call__(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pred = self.predict(theta)
        return pred.hosp, pred.deaths

    def training_set(self) -> DesignMatrix:
        if self.train_thetas is None:
            raise ValueError("this surrogate was saved without its training set")
        n = self.horizon
        return DesignMatrix(self.train_thetas, (), self.train_outputs[:, :n],
                            self.train_outputs[:, n:])


def train_surrogate(thetas: np.ndarray, outputs: np.ndarray, hp: Hyperparams | None = None,
                    variance_threshold: float = 0.95, seed: int = 0,
                    box: PriorBox = DEFAULT_PRIOR_BOX,
                    n_components: int | None = None) -> Surrogate:
    """Fit PCA on ``outputs`` (m x 2n) and a forest from ``thetas`` to the coefficients."""
    basis = pca_fit(outputs, variance_threshold, n_components=n_components)
    forest = None
    if basis.k > 0:
        alpha = pca_project(basis, outputs)
        forest = fit_forest(thetas, alpha, hp, seed)
    return Surrogate(basis, forest, box, {"variance_threshold": variance_threshold,
                                          "seed": int(seed)},
                     np.asarray(thetas, float).copy(), np.asarray(outputs, float).copy())


def surrogate_predict(basis: PcaBasis, forest: RandomForest | None,
                      theta: np.ndarray, box: PriorBox | None = None) -> SurrogatePrediction:
    return Surrogate(basis, forest, box or DEFAULT_PRIOR_BOX).predict(theta)


# ---- persistence -----------------------------------------------------------
#
# layout: MAGIC | u32 version | u64 header length | JSON header | arrays
# arrays (little endian, in order): mean f8[2n], components f8[k, 2n],
# explained_variance f8[r], explained_variance_ratio f8[r], then per tree in
# preorder: feature i8[nodes], threshold f8[nodes], value f8[nodes, k],
# n_samples i8[nodes], impurity f8[nodes]; finally, when n_train > 0, the
# training inputs f8[n_train, p] and outputs f8[n_train, 2n].

def _children_from_preorder(feature: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(feature)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    pending: list[int] = []
    for i in range(n):
        if pending:
            parent = pending[-1]
            if left[parent] < 0:
                left[parent] = i
            else:
                right[parent] = i
                pending.pop()
        if feature[i] >= 0:
            pending.append(i)
    return left, right


def save_surrogate(model: Surrogate, path: str | Path) -> None:
    b = model.basis
    trees = model.forest.trees if model.forest is not None else []
    header = {
        "format_version": FORMAT_VERSION,
        "dim": int(b.dim),
        "k": int(b.k),
        "n_ratio": int(len(b.explained_variance_ratio)),
        "box": model.box.to_dict(),
        "hyperparams": model.forest.hyperparams.to_dict() if model.forest else None,
        "n_features": int(model.forest.n_features) if model.forest else model.box.dim,
        "tree_nodes": [int(t.n_nodes) for t in trees],
        "meta": model.meta,
        "n_train": 0 if model.train_thetas is None else int(len(model.train_thetas)),
        "n_params": model.box.dim,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for arr in (b.mean, b.retained, b.explained_variance, b.explained_variance_ratio):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for t in trees:
            fh.write(np.ascontiguousarray(t.feature, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(t.threshold, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(t.n_samples, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(t.impurity, dtype="<f8").tobytes())
        if model.train_thetas is not None:
            fh.write(np.ascontiguousarray(model.train_thetas, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(model.train_outputs, dtype="<f8").tobytes())


def load_surrogate(path: str | Path) -> Surrogate:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a surrogate model file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    pos = 8 + struct.calcsize("<IQ")
    header = json.loads(data[pos:pos + hlen])
    pos += hlen

    def take(dtype, count, shape=None):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).copy()
        pos += arr.nbytes
        return arr.reshape(shape) if shape is not None else arr

    dim, k, r = header["dim"], header["k"], header["n_ratio"]
    mean = take("<f8", dim)
    comps = take("<f8", k * dim, (k, dim))
    ev = take("<f8", r)
    ratio = take("<f8", r)
    basis = PcaBasis(mean, comps, ev, ratio, k)
    forest = None
    if header["hyperparams"] is not None:
        trees = []
        for n in header["tree_nodes"]:
            feature = take("<i8", n).astype(np.int64)
            threshold = take("<f8", n)
            value = take("<f8", n * k, (n, k))
            n_samples = take("<i8", n).astype(np.int64)
            impurity = take("<f8", n)
            left, right = _children_from_preorder(feature)
            trees.append(Tree(feature, threshold, left, right, value, n_samples, impurity))
        forest = RandomForest(trees, Hyperparams(**header["hyperparams"]), header["n_features"])
    box = PriorBox.from_dict(header["box"])
    train_x = train_y = None
    m = header.get("n_train", 0)
    if m:
        train_x = take("<f8", m * header["n_params"], (m, header["n_params"]))
        train_y = take("<f8", m * dim, (m, dim))
    return Surrogate(basis, forest, box, header.get("meta", {}), train_x, train_y)
