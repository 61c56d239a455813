"""Multi-output CART regression trees (numba kernels).

Nodes are stored in preorder: a split node's left child is the next node.
Arrays per tree: ``feature`` (-1 for leaves), ``threshold``, ``left``,
``right``, ``value`` (node prediction, one entry per output), ``n_samples``
and ``impurity`` (criterion summed over the node's samples and outputs).
Samples go left when ``x[feature] <= threshold``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

SQUARED_ERROR = 0
ABSOLUTE_ERROR = 1
CRITERIA = {"squared_error": SQUARED_ERROR, "absolute_error": ABSOLUTE_ERROR}


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    impurity: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_outputs(self) -> int:
        return self.value.shape[1]

    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        return _predict_tree(self.feature, self.threshold, self.left, self.right, self.value, X)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        return _apply_tree(self.feature, self.threshold, self.left, self.right, X)


@nb.njit(cache=True)
def _median_sorted(buf, n):
    h = n // 2
    if n % 2 == 1:
        return buf[h]
    return 0.5 * (buf[h - 1] + buf[h])


@nb.njit(cache=True)
def _node_stats(Y, idx, start, end, criterion, value_out):
    """Fill ``value_out`` with the node prediction; return summed impurity."""
    n = end - start
    k = Y.shape[1]
    total = 0.0
    if criterion == SQUARED_ERROR:
        for j in range(k):
            s = 0.0
            for t in range(start, end):
                s += Y[idx[t], j]
            mu = s / n
            value_out[j] = mu
            for t in range(start, end):
                d = Y[idx[t], j] - mu
                total += d * d
    else:
        buf = np.empty(n)
        for j in range(k):
            for t in range(n):
                buf[t] = Y[idx[start + t], j]
            buf.sort()
            med = _median_sorted(buf, n)
            value_out[j] = med
            for t in range(n):
                total += abs(buf[t] - med)
    return total


@nb.njit(cache=True)
def _prefix_sad(ycol, order, n, out):
    """out[i] = sum |y - median| over the first i samples of ``order`` (i = 1..n)."""
    buf = np.empty(n)
    for i in range(n):
        v = ycol[order[i]]
        # insertion into the running sorted prefix
        pos = i
        while pos > 0 and buf[pos - 1] > v:
            buf[pos] = buf[pos - 1]
            pos -= 1
        buf[pos] = v
        m = i + 1
        med = _median_sorted(buf, m)
        s = 0.0
        for t in range(m):
            s += abs(buf[t] - med)
        out[m] = s


@nb.njit(cache=True)
def _best_split(X, Y, idx, start, end, features, criterion, min_leaf):
    """Return (feature, threshold, children impurity) of the best split, feature=-1 if none."""
    n = end - start
    k = Y.shape[1]
    best_f = -1
    best_thr = 0.0
    best_val = np.inf
    xs = np.empty(n)
    ycol = np.empty(n)
    left_c = np.empty(n + 1)
    right_c = np.empty(n + 1)
    tmp = np.empty(n + 1)
    rev = np.empty(n, dtype=np.int64)
    for fi in range(len(features)):
        f = features[fi]
        for t in range(n):
            xs[t] = X[idx[start + t], f]
        order = np.argsort(xs, kind="mergesort")
        if xs[order[0]] == xs[order[n - 1]]:
            continue
        for i in range(n + 1):
            left_c[i] = 0.0
            right_c[i] = 0.0
        if criterion == SQUARED_ERROR:
            for j in range(k):
                for t in range(n):
                    ycol[t] = Y[idx[start + order[t]], j]
                tot_s = 0.0
                tot_q = 0.0
                for t in range(n):
                    tot_s += ycol[t]
                    tot_q += ycol[t] * ycol[t]
                s = 0.0
                q = 0.0
                for i in range(1, n):
                    s += ycol[i - 1]
                    q += ycol[i - 1] * ycol[i - 1]
                    sse_l = q - s * s / i
                    rs = tot_s - s
                    sse_r = (tot_q - q) - rs * rs / (n - i)
                    left_c[i] += max(sse_l, 0.0)
                    right_c[i] += max(sse_r, 0.0)
        else:
            for t in range(n):
                rev[t] = order[n - 1 - t]
            for j in range(k):
                for t in range(n):
                    ycol[t] = Y[idx[start + t], j]
                _prefix_sad(ycol, order, n, tmp)
                for i in range(1, n):
                    left_c[i] += tmp[i]
                _prefix_sad(ycol, rev, n, tmp)
                for i in range(1, n):
                    right_c[i] += tmp[n - i]
        for i in range(min_leaf, n - min_leaf + 1):
            lo = xs[order[i - 1]]
            hi = xs[order[i]]
            if lo == hi:
                continue
            val = left_c[i] + right_c[i]
            tol = 1e-10 * (abs(best_val) + 1e-300) if best_val < np.inf else 0.0
            if val < best_val - tol:
                best_val = val
                best_f = f
                thr = 0.5 * (lo + hi)
                if not (lo <= thr < hi):
                    thr = lo
                best_thr = thr
    return best_f, best_thr, best_val


@nb.njit(cache=True)
def _build(X, Y, sample_idx, criterion, min_leaf, max_features, max_depth, feat_keys):
    m = len(sample_idx)
    k = Y.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, k))
    n_samples = np.zeros(cap, dtype=np.int64)
    impurity = np.zeros(cap)

    idx = sample_idx.copy()
    # stack entries: start, end, depth, parent, side (0 left, 1 right)
    stack = np.empty((cap, 5), dtype=np.int64)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = m
    stack[0, 2] = 0
    stack[0, 3] = -1
    stack[0, 4] = 0
    top = 1
    count = 0
    vbuf = np.empty(k)
    while top > 0:
        top -= 1
        start = stack[top, 0]
        end = stack[top, 1]
        depth = stack[top, 2]
        parent = stack[top, 3]
        side = stack[top, 4]
        node = count
        count += 1
        if parent >= 0:
            if side == 0:
                left[parent] = node
            else:
                right[parent] = node
        imp = _node_stats(Y, idx, start, end, criterion, vbuf)
        value[node, :] = vbuf
        n_samples[node] = end - start
        impurity[node] = imp
        n = end - start
        mag = 0.0
        for j in range(k):
            mag += vbuf[j] * vbuf[j] if criterion == SQUARED_ERROR else abs(vbuf[j])
        # rounding-level impurity counts as pure
        tiny = (1e-24 if criterion == SQUARED_ERROR else 1e-12) * n * (1.0 + mag)
        if n < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth) or imp <= tiny:
            continue
        keys = feat_keys[node % feat_keys.shape[0]]
        chosen = np.sort(np.argsort(keys, kind="mergesort")[:max_features])
        f, thr, val = _best_split(X, Y, idx, start, end, chosen, criterion, min_leaf)
        if f < 0 or not (val < imp * (1.0 - 1e-12)):
            continue
        # partition idx[start:end] stably by the split
        seg = idx[start:end].copy()
        nl = 0
        for t in range(n):
            if X[seg[t], f] <= thr:
                idx[start + nl] = seg[t]
                nl += 1
        nr = nl
        for t in range(n):
            if X[seg[t], f] > thr:
                idx[start + nr] = seg[t]
                nr += 1
        feature[node] = f
        threshold[node] = thr
        # right pushed first so the left subtree is numbered next (preorder)
        stack[top, 0] = start + nl
        stack[top, 1] = end
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 1
        top += 1
        stack[top, 0] = start
        stack[top, 1] = start + nl
        stack[top, 2] = depth + 1
        stack[top, 3] = node
        stack[top, 4] = 0
        top += 1
    return (feature[:count], threshold[:count], left[:count], right[:count], value[:count],
            n_samples[:count], impurity[:count])


@nb.njit(cache=True)
def _apply_tree(feature, threshold, left, right, X):
    out = np.empty(X.shape[0], dtype=np.int64)
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = node
    return out


@nb.njit(cache=True)
def _predict_tree(feature, threshold, left, right, value, X):
    leaves = _apply_tree(feature, threshold, left, right, X)
    out = np.empty((X.shape[0], value.shape[1]))
    for r in range(X.shape[0]):
        out[r, :] = value[leaves[r]]
    return out


def fit_tree(X: np.ndarray, Y: np.ndarray, criterion: str = "squared_error",
             min_samples_leaf: int = 1, max_features: int | None = None,
             max_depth: int | None = None, seed: int = 0,
             sample_idx: np.ndarray | None = None) -> Tree:
    """Grow one greedy CART tree.

    Each split minimises the summed criterion of the two children over a
    random subset of ``max_features`` features; ties go to the lowest
    feature index, then the lowest threshold. Thresholds are midpoints of
    consecutive distinct values. Leaves predict the per-output mean
    (squared error) or median (absolute error).
    """
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    Y = np.ascontiguousarray(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y row counts differ")
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    if min_samples_leaf < 1:
        raise ValueError("min_samples_leaf must be >= 1")
    p = X.shape[1]
    mf = p if max_features is None else min(int(max_features), p)
    if mf < 1:
        raise ValueError("max_features must be >= 1")
    crit = CRITERIA[criterion]
    if sample_idx is None:
        sample_idx = np.arange(X.shape[0], dtype=np.int64)
    sample_idx = np.ascontiguousarray(sample_idx, dtype=np.int64)
    # one random key row per node: the node's feature subset is the mf smallest keys
    rng = np.random.default_rng(seed)
    feat_keys = rng.random((2 * len(sample_idx) + 1, p)) if mf < p else np.zeros((1, p))
    md = -1 if max_depth is None else int(max_depth)
    return Tree(*_build(X, Y, sample_idx, crit, int(min_samples_leaf), mf, md, feat_keys))
