"""Bagged regression forests and many-armed forests over a fixed partition."""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from numba import njit

from .cart import RegressionTree, TreeParams, _check_X, _column_table, _predict_into, grow, presort
from .dataset import Dataset

FORMAT_VERSION = 1
THREADS_ENV = "ARMEDFOREST_THREADS"
_ARM_TAG = 0x41524D


def default_threads() -> int:
    value = os.environ.get(THREADS_ENV)
    return max(1, int(value)) if value else 1


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters.

    ``mtry=None`` resolves to ``max(1, d // 3)``. ``resample`` is
    ``"bootstrap"`` (n draws with replacement) or ``"subsample"``
    (``round(subsample_fraction * n)`` rows without replacement).
    """

    n_trees: int = 1000
    mtry: int | None = None
    min_node_distinct: int = 5
    max_nodes: int | None = None
    resample: str = "bootstrap"
    subsample_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.resample not in ("bootstrap", "subsample"):
            raise ValueError(f"resample must be 'bootstrap' or 'subsample', got {self.resample!r}")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError(f"subsample_fraction must lie in (0, 1], got {self.subsample_fraction}")

    def tree_params(self, d: int) -> TreeParams:
        mtry = max(1, d // 3) if self.mtry is None else self.mtry
        return TreeParams(mtry=mtry, min_node_distinct=self.min_node_distinct,
                          max_nodes=self.max_nodes, seed=self.seed)

    def replace(self, **changes) -> "ForestParams":
        return ForestParams(**{**asdict(self), **changes})


def tree_seeds(master: int, t: int) -> tuple[int, int]:
    """(resample seed, split seed) of tree ``t``; a pure function of its inputs."""
    state = np.random.SeedSequence(master, spawn_key=(t,)).generate_state(2, np.uint64)
    return int(state[0]), int(state[1])


def arm_seed(master: int, label: int) -> int:
    """Master seed of the sub-forest for arm ``label``."""
    state = np.random.SeedSequence(master, spawn_key=(_ARM_TAG, int(label))).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


def resample_weights(n: int, params: ForestParams, t: int) -> np.ndarray:
    """Row multiplicities of tree ``t``'s resample."""
    rng = np.random.default_rng(tree_seeds(params.seed, t)[0])
    if params.resample == "bootstrap":
        return np.bincount(rng.integers(0, n, size=n), minlength=n)
    k = max(1, int(round(params.subsample_fraction * n)))
    w = np.zeros(n, np.int64)
    w[rng.choice(n, size=k, replace=False)] = 1
    return w


@njit(cache=True, nogil=True)
def _sorted_mean(buf, out):
    # Sorting makes the compensated sum independent of tree order.
    T, c = buf.shape
    col = np.empty(T)
    for i in range(c):
        for t in range(T):
            col[t] = buf[t, i]
        col.sort()
        if col[0] == col[T - 1]:
            out[i] = col[0]
            continue
        s = 0.0
        comp = 0.0
        for t in range(T):
            v = col[t]
            u = s + v
            if abs(s) >= abs(v):
                comp += (s - u) + v
            else:
                comp += (v - u) + s
            s = u
        out[i] = (s + comp) / T


def _mean_of_trees(trees: list[RegressionTree], X: np.ndarray, chunk_bytes: int = 64 << 20) -> np.ndarray:
    n = X.shape[0]
    out = np.empty(n)
    T = len(trees)
    chunk = max(1, min(n, chunk_bytes // (8 * T)))
    buf = np.empty((T, chunk))
    for a in range(0, n, chunk):
        Xc = X[a:a + chunk]
        b = buf[:, :Xc.shape[0]]
        for t, tree in enumerate(trees):
            _predict_into(tree.feature, tree.threshold, tree.value, tree.left, Xc, b[t])
        _sorted_mean(b, out[a:a + Xc.shape[0]])
    return out


@dataclass
class Forest:
    """An ensemble of regression trees; predictions are the tree average."""

    trees: list[RegressionTree]
    params: ForestParams
    n_features: int
    n_train: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X) -> np.ndarray:
        return _mean_of_trees(self.trees, _check_X(X, self.n_features))

    def resample_indices(self, t: int) -> np.ndarray:
        """Training row indices of tree ``t`` (regenerated from the seed)."""
        w = resample_weights(self.n_train, self.params, t)
        return np.repeat(np.arange(self.n_train), w)

    def column_table(self, X: np.ndarray, j: int, grid: np.ndarray) -> np.ndarray:
        """``out[i, r]`` = prediction for row ``i`` with column ``j`` set to ``grid[r]``.

        ``grid`` must be sorted ascending. Evaluated exactly by walking each
        tree once per row and splitting the walk at splits on ``j``.
        """
        X = _check_X(X, self.n_features)
        m = grid.shape[0]
        table = np.zeros((X.shape[0], m + 1))
        for tree in self.trees:
            cut = np.searchsorted(grid, tree.threshold, side="right")
            _column_table(tree.feature, tree.threshold, tree.value, tree.left, cut, X, j, table)
        return np.cumsum(table[:, :m], axis=1) / self.n_trees

    def to_dict(self) -> dict[str, Any]:
        return {"format": "armedforest.forest", "version": FORMAT_VERSION,
                "params": asdict(self.params), "n_features": self.n_features,
                "n_train": self.n_train, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Forest":
        _check_format(doc, "armedforest.forest")
        return cls([RegressionTree.from_dict(t) for t in doc["trees"]], ForestParams(**doc["params"]),
                   int(doc["n_features"]), int(doc["n_train"]))


def _check_format(doc, fmt):
    if doc.get("format") != fmt:
        raise ValueError(f"expected a {fmt!r} document, got {doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {doc.get('version')!r}")


def fit_forest(data: Dataset, params: ForestParams = ForestParams(), n_jobs: int | None = None) -> Forest:
    """Fit ``params.n_trees`` trees, each on its own seeded resample.

    Output is identical for every ``n_jobs``: tree ``t`` depends only on
    ``(data, params, t)``.
    """
    X, y = data.features, data.response
    tree_params = params.tree_params(data.d)
    tree_params.resolve_mtry(data.d)
    order = presort(X)

    def one(t):
        w = resample_weights(data.n, params, t)
        return grow(X, y, w, tree_params, tree_seeds(params.seed, t)[1], order)

    n_jobs = default_threads() if n_jobs is None else n_jobs
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(t) for t in range(params.n_trees)]
    return Forest(trees, params, data.d, data.n)


def predict_forest(forest: Forest, x):
    x = np.asarray(x, dtype=np.float64)
    out = forest.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def constant_forest(value: float, d: int, n_rows: int, params: ForestParams) -> Forest:
    """One single-leaf tree predicting ``value``."""
    tree = RegressionTree(np.array([-1], np.int32), np.array([np.nan]), np.array([float(value)]),
                          np.array([-1], np.int32), np.array([n_rows], np.int32), d)
    return Forest([tree], params, d, n_rows)


# --------------------------------------------------------------------------
# arm functions


@dataclass(frozen=True)
class DeltaArm:
    """Label rows by agreement indicators ``delta(x_a, x_b)`` of column pairs.

    With pairs ``(a1, b1), ..., (ak, bk)`` (0-based) the label is
    ``sum_i delta(x_ai, x_bi) 2^i``, giving up to ``2^k`` arms.
    """

    pairs: tuple[tuple[int, int], ...]

    @property
    def name(self) -> str:
        return "&".join(f"delta_x{a + 1}_x{b + 1}" for a, b in self.pairs)

    @property
    def max_column(self) -> int:
        return max(max(p) for p in self.pairs)

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        label = np.zeros(X.shape[0], np.int64)
        for i, (a, b) in enumerate(self.pairs):
            label += (X[:, a] == X[:, b]).astype(np.int64) << i
        return label


@dataclass(frozen=True)
class ConstantArm:
    name: str = "constant"
    max_column: int = -1

    def __call__(self, X) -> np.ndarray:
        return np.zeros(np.atleast_2d(X).shape[0], np.int64)


_DELTA_RE = re.compile(r"^delta_x(\d+)_x(\d+)$")


def resolve_arm(name: str, d: int | None = None):
    """Arm function from its name: ``constant`` or ``delta_xA_xB[&delta_xC_xD...]`` (1-based)."""
    if name == "constant":
        return ConstantArm()
    pairs = []
    for part in name.split("&"):
        match = _DELTA_RE.match(part)
        if not match:
            raise ValueError(f"unknown arm function {name!r}")
        a, b = int(match.group(1)), int(match.group(2))
        if a < 1 or b < 1 or a == b:
            raise ValueError(f"arm {part!r}: columns must be distinct and 1-based")
        if d is not None and max(a, b) > d:
            raise ValueError(f"arm {part!r} references column x{max(a, b)} but d={d}")
        pairs.append((a - 1, b - 1))
    return DeltaArm(tuple(pairs))


@dataclass
class ArmedForest:
    """Separate forests per cell of ``arm_function``; unseen cells go to ``fallback``."""

    arm_function: Callable[[np.ndarray], np.ndarray]
    arms: dict[int, Forest]
    fallback: Forest | None
    n_features: int
    fit_report: dict[int, dict[str, Any]] = field(default_factory=dict)

    def forest_for(self, label: int) -> Forest:
        forest = self.arms.get(int(label), self.fallback)
        if forest is None:
            raise ValueError(f"arm {label} was not seen in training and no fallback forest was fitted")
        return forest

    def predict(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        labels = np.asarray(self.arm_function(X))
        out = np.empty(X.shape[0])
        for label in np.unique(labels):
            rows = labels == label
            out[rows] = self.forest_for(label).predict(X[rows])
        return out

    @property
    def trees(self) -> list[RegressionTree]:
        return [t for f in self.arms.values() for t in f.trees]

    def to_dict(self) -> dict[str, Any]:
        name = getattr(self.arm_function, "name", None)
        if name is None:
            raise ValueError("only named arm functions (see resolve_arm) can be serialized")
        return {"format": "armedforest.armed_forest", "version": FORMAT_VERSION, "arm": name,
                "n_features": self.n_features,
                "arms": {str(k): f.to_dict() for k, f in sorted(self.arms.items())},
                "fallback": None if self.fallback is None else self.fallback.to_dict(),
                "fit_report": {str(k): v for k, v in self.fit_report.items()}}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ArmedForest":
        _check_format(doc, "armedforest.armed_forest")
        d = int(doc["n_features"])
        arms = {int(k): Forest.from_dict(v) for k, v in doc["arms"].items()}
        fallback = None if doc["fallback"] is None else Forest.from_dict(doc["fallback"])
        report = {int(k): v for k, v in doc.get("fit_report", {}).items()}
        return cls(resolve_arm(doc["arm"], d), arms, fallback, d, report)


def fit_armed_forest(data: Dataset, arm_function, params: ForestParams = ForestParams(),
                     fit_fallback: bool = True, n_jobs: int | None = None) -> ArmedForest:
    """Fit one forest per arm label, seeded by ``arm_seed(params.seed, label)``.

    Arms with fewer rows than ``params.min_node_distinct`` get a constant
    (mean) predictor and are marked ``degenerate`` in ``fit_report``. The
    fallback forest, used for labels unseen in training, is fitted on all
    rows with ``params.seed`` unless ``fit_fallback`` is false.
    """
    if isinstance(arm_function, str):
        arm_function = resolve_arm(arm_function, data.d)
    labels = np.asarray(arm_function(data.features))
    if labels.shape != (data.n,):
        raise ValueError("arm_function must return one label per row")
    arms, report = {}, {}
    for label in np.unique(labels).tolist():
        rows = np.flatnonzero(labels == label)
        sub_params = params.replace(seed=arm_seed(params.seed, label))
        degenerate = rows.size < params.min_node_distinct
        if degenerate:
            arms[label] = constant_forest(data.response[rows].mean(), data.d, rows.size, sub_params)
        else:
            arms[label] = fit_forest(data.subset(rows), sub_params, n_jobs)
        report[label] = {"n_rows": int(rows.size), "seed": sub_params.seed, "degenerate": degenerate}
    fallback = fit_forest(data, params, n_jobs) if fit_fallback else None
    return ArmedForest(arm_function, arms, fallback, data.d, report)


def predict_armed(armed: ArmedForest, x):
    x = np.asarray(x, dtype=np.float64)
    out = armed.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def save_json(model: Forest | ArmedForest, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_json(path: str | Path) -> Forest | ArmedForest:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") == "armedforest.armed_forest":
        return ArmedForest.from_dict(doc)
    return Forest.from_dict(doc)
