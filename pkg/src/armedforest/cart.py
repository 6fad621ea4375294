"""Greedy variance-reduction regression trees.

Trees are grown breadth-first and stored in processing order, so node ``k``
is the ``(k + 1)``-th split-or-terminate operation of the construction. The
two children of a split node are stored next to each other: the left child
at ``left[k]`` and the right child at ``left[k] + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numba import njit

from .dataset import Dataset

# Relative tolerance (w.r.t. node SSE) below which two split gains are a tie.
GAIN_RTOL = 1e-12


@dataclass(frozen=True)
class TreeParams:
    """Tree-growing rules.

    ``min_node_distinct`` counts distinct feature vectors; the response is
    ignored. ``mtry=None`` means all features.
    """

    mtry: int | None = None
    min_node_distinct: int = 5
    max_nodes: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mtry is not None and self.mtry < 1:
            raise ValueError(f"mtry must be >= 1, got {self.mtry}")
        if self.min_node_distinct < 2:
            raise ValueError(f"min_node_distinct must be >= 2, got {self.min_node_distinct}")
        if self.max_nodes is not None and self.max_nodes < 1:
            raise ValueError(f"max_nodes must be >= 1, got {self.max_nodes}")

    def resolve_mtry(self, d: int) -> int:
        mtry = d if self.mtry is None else self.mtry
        if mtry > d:
            raise ValueError(f"mtry={mtry} exceeds the number of features d={d}")
        return mtry


# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _splitmix64(state):
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _has_distinct(X, idx, s, e, k):
    """True when rows ``idx[s:e]`` hold at least ``k`` distinct feature vectors."""
    if e - s < k:
        return False
    d = X.shape[1]
    reps = np.empty(k, np.int64)
    nrep = 0
    for i in range(s, e):
        r = idx[i]
        dup = False
        for q in range(nrep):
            rr = reps[q]
            if rr == r:
                dup = True
                break
            same = True
            for j in range(d):
                if X[r, j] != X[rr, j]:
                    same = False
                    break
            if same:
                dup = True
                break
        if not dup:
            reps[nrep] = r
            nrep += 1
            if nrep >= k:
                return True
    return False


@njit(cache=True)
def _node_moments(y, w, ord0, s, e):
    # Shifting by the first response keeps constant nodes exact.
    shift = y[ord0[s]]
    acc = 0.0
    cnt = 0
    for i in range(s, e):
        r = ord0[i]
        acc += w[r] * (y[r] - shift)
        cnt += w[r]
    mean = shift + acc / cnt
    stot = 0.0
    sse = 0.0
    for i in range(s, e):
        r = ord0[i]
        c = y[r] - mean
        stot += w[r] * c
        sse += w[r] * c * c
    return cnt, mean, stot, sse


@njit(cache=True)
def _best_split(XT, y, w, order, s, e, cand, cnt, mean, stot, sse):
    """Best (feature, threshold, gain) over ``cand``; feature -1 if no positive gain.

    ``order[f, s:e]`` lists the node's rows sorted by feature ``f`` and
    ``w`` holds row multiplicities. Candidates are scanned in ascending
    feature index and thresholds in ascending order; a later candidate must
    beat the incumbent by more than the tie tolerance, so ties go to the
    lowest feature and then the smallest threshold.
    """
    best_f = -1
    best_thr = np.nan
    best_gain = 0.0
    if e - s < 2 or sse <= 0.0:
        return best_f, best_thr, best_gain
    tol = GAIN_RTOL * sse
    base = stot * stot / cnt
    for q in range(cand.shape[0]):
        f = cand[q]
        sl = 0.0
        nl = 0
        xf = XT[f]
        u = xf[order[f, s]]
        for p in range(s, e - 1):
            r = order[f, p]
            sl += w[r] * (y[r] - mean)
            nl += w[r]
            v = u
            u = xf[order[f, p + 1]]
            if v < u:
                nr = cnt - nl
                sr = stot - sl
                gain = sl * sl / nl + sr * sr / nr - base
                if gain > tol and (best_f < 0 or gain > best_gain + tol):
                    best_f = f
                    best_gain = gain
                    thr = 0.5 * (v + u)
                    if not thr < u:
                        thr = v
                    best_thr = thr
    return best_f, best_thr, best_gain


@njit(cache=True)
def _partition(XT, order, s, e, f, thr, goes_left, buf):
    """Stable partition of every feature's sorted segment; returns the split point."""
    nleft = 0
    xf = XT[f]
    for i in range(s, e):
        r = order[f, i]
        gl = xf[r] <= thr
        goes_left[r] = gl
        if gl:
            nleft += 1
    mid = s + nleft
    for g in range(order.shape[0]):
        a = s
        b = 0
        for i in range(s, e):
            r = order[g, i]
            if goes_left[r]:
                order[g, a] = r
                a += 1
            else:
                buf[b] = r
                b += 1
        for i in range(b):
            order[g, mid + i] = buf[i]
    return mid


@njit(cache=True, nogil=True)
def _grow(X, y, w, presorted, mtry, min_distinct, max_nodes, seed):
    """Grow one tree on the rows with ``w > 0``, each counted ``w`` times.

    ``presorted[f]`` is a full argsort of column ``f``.
    """
    n, d = X.shape
    XT = np.ascontiguousarray(X.T)
    m = 0
    for r in range(n):
        if w[r] > 0:
            m += 1
    order = np.empty((d, m), np.int32)
    for f in range(d):
        a = 0
        for i in range(n):
            r = presorted[f, i]
            if w[r] > 0:
                order[f, a] = r
                a += 1
    cap = max(2 * m - 1, 1)
    if max_nodes > 0 and max_nodes < cap:
        cap = max_nodes
    feature = np.full(cap, -1, np.int32)
    threshold = np.full(cap, np.nan)
    value = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    count = np.zeros(cap, np.int32)
    start = np.zeros(cap, np.int64)
    stop = np.zeros(cap, np.int64)
    goes_left = np.zeros(n, np.bool_)
    buf = np.empty(m, np.int32)
    feats = np.arange(d)
    cand = np.empty(mtry, np.int64)
    state = np.empty(1, np.uint64)
    state[0] = np.uint64(seed)

    stop[0] = m
    n_nodes = 1
    k = 0
    while k < n_nodes:
        s = start[k]
        e = stop[k]
        cnt, mean, stot, sse = _node_moments(y, w, order[0], s, e)
        count[k] = cnt
        value[k] = mean
        if n_nodes + 2 <= cap and _has_distinct(X, order[0], s, e, min_distinct):
            for i in range(mtry):
                j = i + np.int64(_splitmix64(state) % np.uint64(d - i))
                tmp = feats[i]
                feats[i] = feats[j]
                feats[j] = tmp
            cand[:] = np.sort(feats[:mtry])
            f, thr, gain = _best_split(XT, y, w, order, s, e, cand, cnt, mean, stot, sse)
            if f >= 0:
                mid = _partition(XT, order, s, e, f, thr, goes_left, buf)
                feature[k] = f
                threshold[k] = thr
                left[k] = n_nodes
                start[n_nodes] = s
                stop[n_nodes] = mid
                start[n_nodes + 1] = mid
                stop[n_nodes + 1] = e
                n_nodes += 2
        k += 1
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        value[:n_nodes].copy(),
        left[:n_nodes].copy(),
        count[:n_nodes].copy(),
    )


@njit(cache=True, nogil=True)
def _apply(feature, threshold, left, X, out):
    for i in range(X.shape[0]):
        k = 0
        while feature[k] >= 0:
            if X[i, feature[k]] <= threshold[k]:
                k = left[k]
            else:
                k = left[k] + 1
        out[i] = k


@njit(cache=True, nogil=True)
def _predict_into(feature, threshold, value, left, X, out):
    for i in range(X.shape[0]):
        k = 0
        while feature[k] >= 0:
            if X[i, feature[k]] <= threshold[k]:
                k = left[k]
            else:
                k = left[k] + 1
        out[i] = value[k]


@njit(cache=True)
def _path_features(feature, left, d):
    n = feature.shape[0]
    involved = np.zeros((n, d), np.bool_)
    # parents precede children in storage order
    for k in range(n):
        f = feature[k]
        if f >= 0:
            c = left[k]
            for j in range(d):
                involved[c, j] = involved[k, j]
                involved[c + 1, j] = involved[k, j]
            involved[c, f] = True
            involved[c + 1, f] = True
    return involved


@njit(cache=True, nogil=True)
def _column_table(feature, threshold, value, left, cut, X, j, table):
    """Add this tree's prediction, as a step function of column ``j``, to ``table``.

    ``table[i, r]`` receives the prediction for row ``i`` with its ``j``-th
    value replaced by the ``r``-th grid value, in difference form: a leaf
    reached for grid ranks ``[lo, hi)`` adds its value at ``lo`` and removes
    it at ``hi``. ``cut[k]`` is the number of grid values ``<= threshold[k]``.
    """
    m = table.shape[1] - 1
    n_nodes = feature.shape[0]
    st_node = np.empty(n_nodes, np.int64)
    st_lo = np.empty(n_nodes, np.int64)
    st_hi = np.empty(n_nodes, np.int64)
    for i in range(X.shape[0]):
        top = 0
        st_node[0] = 0
        st_lo[0] = 0
        st_hi[0] = m
        top = 1
        while top > 0:
            top -= 1
            k = st_node[top]
            lo = st_lo[top]
            hi = st_hi[top]
            while feature[k] >= 0 and lo < hi:
                f = feature[k]
                if f == j:
                    c = cut[k]
                    if c < hi and c > lo:
                        st_node[top] = left[k] + 1
                        st_lo[top] = c
                        st_hi[top] = hi
                        top += 1
                        hi = c
                        k = left[k]
                    elif c >= hi:
                        k = left[k]
                    else:
                        k = left[k] + 1
                elif X[i, f] <= threshold[k]:
                    k = left[k]
                else:
                    k = left[k] + 1
            if lo < hi:
                table[i, lo] += value[k]
                table[i, hi] -= value[k]


# --------------------------------------------------------------------------
# public API


@dataclass
class RegressionTree:
    """A fitted tree stored as parallel node arrays in processing order.

    ``feature[k] == -1`` marks a leaf. ``count[k]`` is the number of training
    rows (with multiplicity) routed through node ``k``; ``value[k]`` is their
    mean response.
    """

    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    left: np.ndarray
    count: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def n_leaves(self) -> int:
        return int(self.is_leaf.sum())

    @property
    def operation_index(self) -> np.ndarray:
        return np.arange(1, self.n_nodes + 1)

    def predict(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        out = np.empty(X.shape[0])
        _predict_into(self.feature, self.threshold, self.value, self.left, X, out)
        return out

    def apply(self, X) -> np.ndarray:
        """Index of the leaf each row of ``X`` lands in."""
        X = _check_X(X, self.n_features)
        out = np.empty(X.shape[0], np.int64)
        _apply(self.feature, self.threshold, self.left, X, out)
        return out

    def path_features(self) -> np.ndarray:
        """(n_nodes, d) boolean matrix: features split on above each node."""
        return _path_features(self.feature, self.left, self.n_features)

    def to_dict(self) -> dict[str, Any]:
        nodes = []
        for k in range(self.n_nodes):
            if self.feature[k] < 0:
                nodes.append({"id": k, "leaf": True, "value": float(self.value[k]),
                              "n_rows": int(self.count[k])})
            else:
                c = int(self.left[k])
                nodes.append({"id": k, "leaf": False, "feature": int(self.feature[k]),
                              "threshold": float(self.threshold[k]), "left": c, "right": c + 1,
                              "value": float(self.value[k]), "n_rows": int(self.count[k])})
        return {"n_features": self.n_features, "nodes": nodes}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RegressionTree":
        nodes = doc["nodes"]
        n = len(nodes)
        feature = np.full(n, -1, np.int32)
        threshold = np.full(n, np.nan)
        value = np.zeros(n)
        left = np.full(n, -1, np.int32)
        count = np.zeros(n, np.int32)
        for k, node in enumerate(nodes):
            if node["id"] != k:
                raise ValueError(f"node {k} has id {node['id']}; nodes must be listed in order")
            value[k] = node["value"]
            count[k] = node["n_rows"]
            if not node["leaf"]:
                if node["right"] != node["left"] + 1:
                    raise ValueError(f"node {k}: children must be adjacent")
                feature[k] = node["feature"]
                threshold[k] = node["threshold"]
                left[k] = node["left"]
        return cls(feature, threshold, value, left, count, int(doc["n_features"]))


def _check_X(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != d:
        raise ValueError(f"expected {d} features, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("input contains non-finite values")
    return np.ascontiguousarray(X)


def _as_seed(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng) & 0xFFFFFFFFFFFFFFFF
    return int(np.random.default_rng(rng).integers(0, 2**63))


def presort(X: np.ndarray) -> np.ndarray:
    """(d, n) array whose row ``f`` is a stable argsort of column ``f``."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)


def grow(X: np.ndarray, y: np.ndarray, weights: np.ndarray, params: TreeParams, seed: int,
         presorted: np.ndarray | None = None) -> RegressionTree:
    """Grow a tree on the rows of ``X`` counted ``weights[r]`` times each.

    Low-level entry shared by :func:`fit_tree` and the forest layer, which
    passes bootstrap multiplicities and a column presort computed once.
    """
    d = X.shape[1]
    mtry = params.resolve_mtry(d)
    if presorted is None:
        presorted = presort(X)
    arrays = _grow(X, y, np.asarray(weights, dtype=np.int64), presorted, mtry,
                   params.min_node_distinct, params.max_nodes or 0,
                   np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return RegressionTree(*arrays, n_features=d)


def fit_tree(data: Dataset, params: TreeParams = TreeParams(), rng=None) -> RegressionTree:
    """Fit a tree on every row of ``data``.

    ``rng`` may be an int seed or a numpy Generator; when omitted,
    ``params.seed`` is used.
    """
    seed = params.seed if rng is None else _as_seed(rng)
    return grow(data.features, data.response, np.ones(data.n, np.int64), params, seed)


def predict_tree(tree: RegressionTree, x) -> float | np.ndarray:
    """Predict one feature vector (returns a float) or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    out = tree.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def best_split(data: Dataset, rows=None, candidate_features=None):
    """Best variance-reduction split of ``rows`` over ``candidate_features``.

    Returns ``(feature, threshold, sse_gain)`` or None when no split has
    strictly positive gain. Features are 0-based column indices.
    """
    X, y = data.features, data.response
    w = np.zeros(data.n, np.int64)
    if rows is None:
        w[:] = 1
    else:
        np.add.at(w, np.asarray(rows, dtype=np.int64), 1)
    if not w.any():
        raise ValueError("rows must be nonempty")
    cand = np.arange(data.d) if candidate_features is None else np.asarray(candidate_features)
    cand = np.unique(cand).astype(np.int64)
    order = np.ascontiguousarray(np.array([o[w[o] > 0] for o in presort(X)]))
    m = order.shape[1]
    cnt, mean, stot, sse = _node_moments(y, w, order[0], 0, m)
    f, thr, gain = _best_split(np.ascontiguousarray(X.T), y, w, order, 0, m, cand, cnt, mean, stot, sse)
    if f < 0:
        return None
    return int(f), float(thr), float(gain)


@dataclass
class TreeStructure:
    """Per-operation split record and per-leaf variable involvement of one tree.

    ``split_feature[k]`` is the feature split at operation ``k + 1`` or -1
    if that operation terminated a node. ``leaf_features`` lists, for each
    leaf in storage order, the set of features on its root-to-leaf path.
    """

    split_feature: np.ndarray
    leaf_nodes: np.ndarray
    leaf_features: list[frozenset[int]]
    leaf_rows: np.ndarray

    @property
    def split_sequence(self) -> list[tuple[int, int]]:
        """``(operation_index, feature)`` for every operation that split."""
        return [(k + 1, int(f)) for k, f in enumerate(self.split_feature) if f >= 0]


def tree_structure_report(tree: RegressionTree) -> TreeStructure:
    involved = tree.path_features()
    leaves = np.flatnonzero(tree.is_leaf)
    sets = [frozenset(np.flatnonzero(involved[k]).tolist()) for k in leaves]
    return TreeStructure(tree.feature.copy(), leaves, sets, tree.count[leaves].copy())
