"""Bagged Gini decision trees, compiled with numba.

The ensemble is deliberately small in scope: numeric feature matrix, integer
class labels, bootstrap rows per tree, a random subset of ``max_features``
candidate features per split, and unlimited depth. Each tree gets its own
integer seed drawn from a Philox stream, so results depend only on the seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import SpecInvalid


@nb.njit(cache=True)
def _gini_split(xs, ys, n_classes, total_counts):
    """Best threshold of a sorted feature column; returns (score, threshold)."""
    n = xs.shape[0]
    left = np.zeros(n_classes)
    best_score = np.inf
    best_thr = np.nan
    for i in range(n - 1):
        left[ys[i]] += 1.0
        if xs[i + 1] <= xs[i]:
            continue
        n_l = i + 1.0
        n_r = n - n_l
        g_l = 1.0
        g_r = 1.0
        for k in range(n_classes):
            p_l = left[k] / n_l
            p_r = (total_counts[k] - left[k]) / n_r
            g_l -= p_l * p_l
            g_r -= p_r * p_r
        score = n_l * g_l + n_r * g_r
        if score < best_score - 1e-12:
            best_score = score
            best_thr = 0.5 * (xs[i] + xs[i + 1])
    return best_score, best_thr


@nb.njit(cache=True)
def _build_tree(X, y, rows, n_classes, max_features, seed):
    np.random.seed(seed)
    n_features = X.shape[1]
    cap = 2 * rows.shape[0] + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, n_classes))

    # explicit stack of (node id, start, end) over a shared index buffer
    idx = rows.copy()
    stack_node = np.zeros(cap, dtype=np.int64)
    stack_lo = np.zeros(cap, dtype=np.int64)
    stack_hi = np.zeros(cap, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = idx.shape[0]
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        m = hi - lo
        counts = np.zeros(n_classes)
        for i in range(lo, hi):
            counts[y[idx[i]]] += 1.0
        for k in range(n_classes):
            value[node, k] = counts[k] / m
        n_present = 0
        for k in range(n_classes):
            if counts[k] > 0:
                n_present += 1
        if n_present <= 1 or m < 2:
            continue
        order = np.random.permutation(n_features)
        best_score = np.inf
        best_f = -1
        best_t = 0.0
        tried = 0
        sub = idx[lo:hi]
        for j in range(n_features):
            if tried >= max_features and best_f >= 0:
                break
            f = order[j]
            col = X[sub, f]
            srt = np.argsort(col, kind="mergesort")
            score, thr = _gini_split(col[srt], y[sub[srt]], n_classes, counts)
            tried += 1
            if not np.isnan(thr) and score < best_score - 1e-12:
                best_score = score
                best_f = f
                best_t = thr
        if best_f < 0:
            continue
        # partition idx[lo:hi] in place on the chosen split
        i = lo
        j = hi - 1
        while i <= j:
            if X[idx[i], best_f] <= best_t:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[top] = n_nodes + 1
        stack_lo[top] = i
        stack_hi[top] = hi
        top += 1
        stack_node[top] = n_nodes
        stack_lo[top] = lo
        stack_hi[top] = i
        top += 1
        n_nodes += 2
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@nb.njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value, out):
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        for k in range(value.shape[1]):
            out[r, k] += value[node, k]


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_features: str | int = "sqrt"
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise SpecInvalid("n_trees must be >= 1")

    def mtry(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.floor(math.sqrt(n_features))))
        if self.max_features == "all":
            return n_features
        return max(1, min(n_features, int(self.max_features)))


@dataclass(eq=False)
class RandomForest:
    classes: np.ndarray
    trees: list
    n_features: int

    def predict_proba(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise SpecInvalid(f"expected {self.n_features} features, got shape {X.shape}")
        out = np.zeros((X.shape[0], len(self.classes)))
        for t in self.trees:
            _predict_tree(X, *t, out)
        return out / len(self.trees)

    def predict(self, X) -> np.ndarray:
        # argmax takes the first maximum, so ties go to the lowest class index
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]


def fit_forest(X, y, params: ForestParams, gen: np.random.Generator) -> RandomForest:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y)
    if X.shape[0] != len(y) or X.shape[0] == 0:
        raise SpecInvalid("feature matrix and labels must be non-empty and aligned")
    if np.isnan(X).any():
        raise SpecInvalid("forest features must not contain NaN")
    classes, codes = np.unique(y, return_inverse=True)
    codes = codes.astype(np.int64)
    n = X.shape[0]
    mtry = params.mtry(X.shape[1])
    trees = []
    for _ in range(params.n_trees):
        rows = gen.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        seed = int(gen.integers(0, 2**31 - 1))
        trees.append(_build_tree(X, codes, rows.astype(np.int64), len(classes), mtry, seed))
    return RandomForest(classes, trees, X.shape[1])
