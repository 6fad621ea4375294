"""Accuracy metrics, permutation importance and variable-usage statistics.

Importance compares the loss of a predictor on a test set with the loss
after the values of one column are permuted:

    I_j = 100 * (mean permuted loss - baseline loss) / baseline loss

Usage statistics describe how trees actually use the variables: which
variable each node operation split on, and which variables appear on the
root-to-leaf paths of the leaves.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .cart import RegressionTree
from .dataset import Dataset
from .errors import DegenerateBaselineError
from .forest import ArmedForest, DeltaArm, Forest

LOSSES: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "squared": lambda y, p: (y - p) ** 2,
    "absolute": lambda y, p: np.abs(y - p),
}


def predict_with(predictor, X: np.ndarray) -> np.ndarray:
    """Predictions from an object with ``.predict`` or from a plain callable."""
    fn = predictor.predict if hasattr(predictor, "predict") else predictor
    return np.asarray(fn(X), dtype=np.float64)


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    mae: float
    explained_variance: float | None
    n: int


def metrics(y: np.ndarray, pred: np.ndarray) -> MetricsReport:
    resid = pred - y
    mse = float(np.mean(resid * resid))
    var = float(np.var(y))
    ev = 1.0 - mse / var if var > 0 else None
    return MetricsReport(mse, float(np.mean(np.abs(resid))), ev, int(y.shape[0]))


def evaluate(predictor, test: Dataset) -> MetricsReport:
    """MSE, MAE and explained variance on ``test``; the latter is None for a constant response."""
    return metrics(test.response, predict_with(predictor, test.features))


# --------------------------------------------------------------------------
# permutation importance


@dataclass
class ImportanceReport:
    """Per-variable importance (percent) with the per-permutation losses behind it."""

    variables: list[str]
    importance: np.ndarray
    e_hat: float
    n_permutations: int
    permuted_losses: np.ndarray  # (d, n_permutations)
    loss: str = "squared"

    def ranking(self) -> list[int]:
        """Variable indices, most important first."""
        return [int(j) for j in np.argsort(-self.importance, kind="stable")]

    def standard_errors(self) -> np.ndarray:
        """Monte Carlo standard error of each importance value (percent)."""
        if self.n_permutations < 2:
            return np.zeros(len(self.variables))
        sd = self.permuted_losses.std(axis=1, ddof=1)
        return 100 * sd / np.sqrt(self.n_permutations) / self.e_hat

    def rows(self) -> list[dict[str, Any]]:
        se = self.standard_errors()
        return [{"variable": v, "importance": float(self.importance[j]), "se": float(se[j]),
                 "mean_permuted_loss": float(self.permuted_losses[j].mean()), "e_hat": self.e_hat,
                 "n_permutations": self.n_permutations} for j, v in enumerate(self.variables)]


def _master_seed(rng) -> int:
    if rng is None:
        return 0
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(np.random.default_rng(rng).integers(0, 2**63))


def _permutations(n: int, master: int, j: int, n_permutations: int) -> np.ndarray:
    out = np.empty((n_permutations, n), np.int64)
    for p in range(n_permutations):
        out[p] = np.random.default_rng(np.random.SeedSequence(master, spawn_key=(j, p))).permutation(n)
    return out


def _loss_increase_generic(predictor, X, y, base, j, perms, loss_fn):
    base_loss = loss_fn(y, base)
    out = np.empty(perms.shape[0])
    Xp = X.copy()
    for p, perm in enumerate(perms):
        Xp[:, j] = X[perm, j]
        out[p] = np.mean(loss_fn(y, predict_with(predictor, Xp)) - base_loss)
    return out


def _loss_increase_trees(predictor, X, y, base, j, perms, loss_fn, table_budget=1 << 24):
    """Exact permuted losses for forests via per-row step functions of column ``j``."""
    n = X.shape[0]
    col = X[:, j]
    grid, rank = np.unique(col, return_inverse=True)
    new_rank = rank[perms]
    P = perms.shape[0]
    if isinstance(predictor, ArmedForest):
        own = np.asarray(predictor.arm_function(X))
        labels = np.empty((P, n), np.int64)
        Xp = X.copy()
        for p in range(P):
            Xp[:, j] = col[perms[p]]
            labels[p] = predictor.arm_function(Xp)
        forests = {int(lab): predictor.forest_for(lab) for lab in np.union1d(own, labels)}
    else:
        own = np.zeros(n, np.int64)
        labels = np.zeros((P, n), np.int64)
        forests = {0: predictor}

    base_loss = loss_fn(y, base)
    total = np.zeros(P)
    m = grid.shape[0]
    chunk = max(1, min(n, table_budget // ((m + 1) * len(forests))))
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        idx = np.arange(b - a)
        lab_c = labels[:, a:b]
        own_c = own[a:b]
        tables = {lab: f.column_table(X[a:b], j, grid)
                  for lab, f in forests.items() if (lab_c == lab).any() or (own_c == lab).any()}
        own_val = np.empty(b - a)
        for lab, tab in tables.items():
            rows = own_c == lab
            own_val[rows] = tab[idx[rows], rank[a:b][rows]]
        val = np.empty((P, b - a))
        for lab, tab in tables.items():
            mask = lab_c == lab
            val[mask] = tab[np.broadcast_to(idx, (P, b - a))[mask], new_rank[:, a:b][mask]]
        pred = base[a:b] + (val - own_val)
        total += (loss_fn(y[a:b], pred) - base_loss[a:b]).sum(axis=1)
    return total / n


def permutation_importance(predictor, test: Dataset, n_permutations: int = 1000, rng=None,
                           loss: str = "squared", variables: Sequence[int] | None = None) -> ImportanceReport:
    """Importance of each variable from ``n_permutations`` whole-test-set permutations.

    Permutation ``p`` of variable ``j`` is seeded by ``(seed, j, p)``, so
    results do not depend on evaluation order. Forests and armed forests
    are evaluated exactly through per-row step functions; any other
    predictor is re-evaluated on each permuted copy of the test set.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    loss_fn = LOSSES[loss]
    X, y = test.features, test.response
    base = predict_with(predictor, X)
    e_hat = float(np.mean(loss_fn(y, base)))
    if not e_hat > 0:
        raise DegenerateBaselineError("baseline loss is zero; importance is undefined")
    master = _master_seed(rng)
    variables = list(range(test.d)) if variables is None else list(variables)
    fast = isinstance(predictor, (Forest, ArmedForest))
    increases = np.empty((len(variables), n_permutations))
    for row, j in enumerate(variables):
        perms = _permutations(test.n, master, j, n_permutations)
        if fast:
            increases[row] = _loss_increase_trees(predictor, X, y, base, j, perms, loss_fn)
        else:
            increases[row] = _loss_increase_generic(predictor, X, y, base, j, perms, loss_fn)
    importance = 100 * increases.mean(axis=1) / e_hat
    names = [test.column_names[j] for j in variables]
    return ImportanceReport(names, importance, e_hat, n_permutations, e_hat + increases, loss)


# --------------------------------------------------------------------------
# variable usage


@dataclass
class UsageReport:
    """Split-order profile and leaf-involvement statistics over a set of trees.

    ``n_split[k]`` trees split at operation ``k + 1``; ``n_watched[k]`` of
    them split on a watched variable. ``leaf_usage`` maps a column label to
    per-tree proportions of leaves; ``data_fraction`` is the per-tree
    fraction of training rows in leaves whose path involves every watched
    variable.
    """

    watched: tuple[int, ...]
    variables: list[str]
    n_split: np.ndarray
    n_watched: np.ndarray
    n_operations: np.ndarray
    leaf_usage: dict[str, np.ndarray]
    data_fraction: np.ndarray
    variable_leaf_usage: np.ndarray

    @property
    def split_order_profile(self) -> np.ndarray:
        """Proportion at each operation; NaN where no tree split."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.n_split > 0, self.n_watched / np.maximum(self.n_split, 1), np.nan)

    @property
    def data_fraction_joint(self) -> float:
        return float(self.data_fraction.mean())

    def mid_construction_proportion(self, lo: float = 0.25, hi: float = 0.75) -> float:
        """Pooled watched-split proportion over operations ``lo..hi`` of the median tree size."""
        size = float(np.median(self.n_operations))
        a, b = int(np.floor(lo * size)), int(np.ceil(hi * size))
        splits = self.n_split[a:b].sum()
        return float(self.n_watched[a:b].sum() / splits) if splits else float("nan")

    def profile_rows(self) -> list[dict[str, Any]]:
        prof = self.split_order_profile
        return [{"operation": k + 1, "n_split": int(self.n_split[k]), "n_watched": int(self.n_watched[k]),
                 "proportion": float(prof[k])} for k in np.flatnonzero(self.n_split > 0)]

    def leaf_rows(self) -> list[dict[str, Any]]:
        keys = list(self.leaf_usage)
        return [{"tree": t, **{k: float(self.leaf_usage[k][t]) for k in keys},
                 "data_fraction_joint": float(self.data_fraction[t])} for t in range(len(self.data_fraction))]


def usage_statistics(trees: Sequence[RegressionTree] | Forest | ArmedForest, watched: Sequence[int],
                     train: Dataset | None = None) -> UsageReport:
    """Aggregate split order and leaf involvement over ``trees``.

    ``watched`` holds 0-based column indices. ``train`` only supplies
    column names; row counts come from the trees themselves.
    """
    if isinstance(trees, (Forest, ArmedForest)):
        trees = trees.trees
    trees = list(trees)
    if not trees:
        raise ValueError("no trees given")
    watched = tuple(int(w) for w in watched)
    d = trees[0].n_features
    names = train.column_names if train is not None else [f"x{j + 1}" for j in range(d)]
    K = max(t.n_nodes for t in trees)
    n_split = np.zeros(K, np.int64)
    n_watched = np.zeros(K, np.int64)
    keys = [names[w] for w in watched]
    if len(watched) > 1:
        keys += [f"{names[w]}_only" for w in watched]
    keys += ["all", "any"]
    usage = {k: np.empty(len(trees)) for k in keys}
    data_fraction = np.empty(len(trees))
    var_usage = np.zeros(d)
    for t, tree in enumerate(trees):
        split = tree.feature >= 0
        n_split[:tree.n_nodes] += split
        n_watched[:tree.n_nodes] += np.isin(tree.feature, watched)
        leaves = ~split
        inv = tree.path_features()[leaves]
        w_inv = inv[:, list(watched)]
        n_leaves = inv.shape[0]
        for i, w in enumerate(watched):
            usage[names[w]][t] = w_inv[:, i].mean()
            if len(watched) > 1:
                others = np.delete(w_inv, i, axis=1).any(axis=1)
                usage[f"{names[w]}_only"][t] = (w_inv[:, i] & ~others).mean()
        joint = w_inv.all(axis=1)
        usage["all"][t] = joint.mean()
        usage["any"][t] = w_inv.any(axis=1).mean()
        rows = tree.count[leaves]
        data_fraction[t] = rows[joint].sum() / rows.sum()
        var_usage += inv.sum(axis=0) / n_leaves
    n_ops = np.array([t.n_nodes for t in trees])
    return UsageReport(watched, list(names), n_split, n_watched, n_ops, usage, data_fraction,
                       var_usage / len(trees))


# --------------------------------------------------------------------------
# importance/usage discrepancy


@dataclass(frozen=True)
class Suspect:
    variables: tuple[int, ...]
    score: float
    arm: str | None = None


@dataclass
class ScreenResult:
    flagged: list[Suspect]
    candidate_arms: list[Suspect] = field(default_factory=list)

    @property
    def flagged_variables(self) -> list[int]:
        return [s.variables[0] for s in self.flagged]


def _percentile(x: np.ndarray) -> np.ndarray:
    if x.shape[0] < 2:
        return np.zeros_like(x, dtype=np.float64)
    return (rankdata(x) - 1) / (x.shape[0] - 1)


def discrepancy_screen(importance: ImportanceReport, usage: UsageReport, margin: float = 0.5,
                       min_importance: float | None = None,
                       binary: Sequence[bool] | Dataset | None = None) -> ScreenResult:
    """Flag variables ranked much higher by importance than by leaf usage.

    The score of a variable is its importance percentile minus its usage
    percentile (both in [0, 1], ties averaged); variables scoring at least
    ``margin``, and with importance at least ``min_importance`` when given,
    are flagged, highest score first. Pairs of flagged binary variables
    become candidate ``delta`` arm functions.
    """
    imp = np.asarray(importance.importance, dtype=np.float64)
    use = np.asarray(usage.variable_leaf_usage, dtype=np.float64)
    if imp.shape != use.shape:
        raise ValueError("importance and usage must cover the same variables")
    score = _percentile(imp) - _percentile(use)
    keep = score >= margin
    if min_importance is not None:
        keep &= imp >= min_importance
    flagged = [Suspect((int(j),), float(score[j])) for j in np.flatnonzero(keep)]
    flagged.sort(key=lambda s: (-s.score, s.variables))

    if isinstance(binary, Dataset):
        binary = [np.unique(binary.features[:, j]).size <= 2 for j in range(binary.d)]
    arms = []
    if binary is not None:
        cols = sorted(s.variables[0] for s in flagged if binary[s.variables[0]])
        for a, b in combinations(cols, 2):
            arms.append(Suspect((a, b), float(score[a] + score[b]), DeltaArm(((a, b),)).name))
        arms.sort(key=lambda s: (-s.score, s.variables))
    return ScreenResult(flagged, arms)


def write_csv(rows: list[dict[str, Any]], path: str | Path, fieldnames: Sequence[str] | None = None) -> None:
    """Write dict rows as CSV; an empty table still gets its header when ``fieldnames`` is given."""
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        if not fieldnames:
            return
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
