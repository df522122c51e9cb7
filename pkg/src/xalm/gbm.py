"""Gradient-boosted regression trees with exact greedy splits (squared loss).

Trees grow depth-wise. A split sends ``x[feature] < threshold`` to the left
child; thresholds are midpoints between consecutive distinct values. With
squared loss every Hessian is 1, so a node's score is ``G^2 / (n + lambda)``
with ``G`` the residual sum.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import LabeledDataset, format_float
from .optim import EarlyStopping

FORMAT_VERSION = 1

GRID_DEPTHS = (3, 4, 5, 6, 7, 8, 9)
GRID_L2 = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
GRID_RATES = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4)


@dataclass(frozen=True)
class RegressionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def predict(self, points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        node = np.zeros(x.shape[0], dtype=np.intp)
        for _ in range(self.max_depth + 1):
            f = self.feature[node]
            rows = np.flatnonzero(f >= 0)
            if rows.size == 0:
                break
            cur = node[rows]
            go_left = x[rows, f[rows]] < self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
        return self.value[node]

    __call__ = predict

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"leaf": float(self.value[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, data: dict, max_depth: int | None = None) -> "RegressionTree":
        feature, threshold, left, right, value = [], [], [], [], []

        def add(node, depth):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "leaf" in node:
                value[i] = float(node["leaf"])
                return i, depth
            feature[i] = int(node["feature"])
            threshold[i] = float(node["threshold"])
            li, dl = add(node["left"], depth + 1)
            ri, dr = add(node["right"], depth + 1)
            left[i], right[i] = li, ri
            return i, max(dl, dr)

        _, depth = add(data, 0)
        return cls(
            np.array(feature, dtype=np.intp),
            np.array(threshold, dtype=float),
            np.array(left, dtype=np.intp),
            np.array(right, dtype=np.intp),
            np.array(value, dtype=float),
            depth if max_depth is None else max_depth,
        )


def split_gain(g_left, n_left, g_right, n_right, l2_lambda):
    g = g_left + g_right
    n = n_left + n_right
    return 0.5 * (
        g_left**2 / (n_left + l2_lambda)
        + g_right**2 / (n_right + l2_lambda)
        - g**2 / (n + l2_lambda)
    )


def _midpoint(lo: float, hi: float) -> float:
    mid = lo + (hi - lo) / 2.0
    return mid if lo < mid <= hi else hi


def fit_tree(inputs, residuals, max_depth: int, l2_lambda: float = 0.0, order=None) -> RegressionTree:
    """Grow one tree on ``residuals`` by exact greedy search.

    ``order`` may carry precomputed per-feature argsorts of ``inputs``.
    Splits whose gain is not positive are not taken; ties go to the lower
    feature index, then the lower threshold.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    r = np.asarray(residuals, dtype=float).reshape(-1)
    n, d = x.shape
    if n < 1 or r.shape[0] != n:
        raise ValueError("fit_tree needs at least one row and one residual per row")
    if order is None:
        order = np.argsort(x, axis=0, kind="stable")

    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    node_of = np.zeros(n, dtype=np.intp)  # -1 once a sample sits in a final leaf
    open_nodes = [0]
    for depth in range(max_depth + 1):
        sums = np.bincount(node_of[node_of >= 0], weights=r[node_of >= 0], minlength=len(feature))
        counts = np.bincount(node_of[node_of >= 0], minlength=len(feature))
        sq = np.bincount(node_of[node_of >= 0], weights=r[node_of >= 0] ** 2, minlength=len(feature))
        for node in open_nodes:
            value[node] = sums[node] / (counts[node] + l2_lambda) if counts[node] + l2_lambda > 0 else 0.0
        if depth == max_depth or not open_nodes:
            break
        best = {nd: (0.0, -1, 0.0) for nd in open_nodes}  # gain, feature, threshold
        for j in range(d):
            idx = order[:, j]
            idx = idx[node_of[idx] >= 0]
            groups = node_of[idx]
            perm = np.argsort(groups, kind="stable")
            idx, groups = idx[perm], groups[perm]
            xs, rs = x[idx, j], r[idx]
            starts = np.flatnonzero(np.r_[True, groups[1:] != groups[:-1]])
            ends = np.r_[starts[1:], len(idx)]
            for s, e in zip(starts, ends):
                nd = int(groups[s])
                if e - s < 2:
                    continue
                xv, rv = xs[s:e], rs[s:e]
                g_left = np.cumsum(rv)[:-1]
                n_left = np.arange(1, e - s)
                total = g_left[-1] + rv[-1]
                gain = split_gain(g_left, n_left, total - g_left, (e - s) - n_left, l2_lambda)
                valid = xv[:-1] < xv[1:]
                if not valid.any():
                    continue
                gain = np.where(valid, gain, -np.inf)
                k = int(np.argmax(gain))
                tol = 1e-12 * max(sq[nd], 1e-300)
                if gain[k] > tol and gain[k] > best[nd][0]:
                    best[nd] = (float(gain[k]), j, _midpoint(xv[k], xv[k + 1]))
        next_open = []
        for nd in open_nodes:
            gain, j, thr = best[nd]
            if j < 0:
                node_of[node_of == nd] = -1
                continue
            li, ri = len(feature), len(feature) + 1
            for _ in range(2):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
            feature[nd], threshold[nd], left[nd], right[nd] = j, thr, li, ri
            members = np.flatnonzero(node_of == nd)
            goes_left = x[members, j] < thr
            node_of[members[goes_left]] = li
            node_of[members[~goes_left]] = ri
            next_open += [li, ri]
        open_nodes = next_open
    return RegressionTree(
        np.array(feature, dtype=np.intp),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.intp),
        np.array(right, dtype=np.intp),
        np.array(value, dtype=float),
        max_depth,
    )


@dataclass
class GBMModel:
    """F(x) = base_score + learning_rate * sum_m h_m(x)."""

    trees: list[RegressionTree]
    learning_rate: float
    l2_lambda: float
    base_score: float
    max_depth: int = 3
    train_rmse: list[float] = field(default_factory=list, repr=False)
    valid_rmse: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")

    @property
    def n_features(self) -> int | None:
        feats = [int(t.feature.max()) for t in self.trees if t.n_nodes > 1]
        return None if not feats else max(feats) + 1

    def __call__(self, points) -> np.ndarray:
        return predict_gbm(self, points)

    def to_dict(self) -> dict:
        return {
            "model": "gbm",
            "format_version": FORMAT_VERSION,
            "learning_rate": self.learning_rate,
            "l2_lambda": self.l2_lambda,
            "base_score": self.base_score,
            "max_depth": self.max_depth,
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "GBMModel":
        if data.get("model") != "gbm":
            raise ValueError(f"not a GBM model document (model={data.get('model')!r})")
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {data.get('format_version')!r}")
        depth = int(data["max_depth"])
        return cls(
            [RegressionTree.from_dict(t, depth) for t in data["trees"]],
            float(data["learning_rate"]),
            float(data["l2_lambda"]),
            float(data["base_score"]),
            depth,
        )


def predict_gbm(model: GBMModel, points, n_features: int | None = None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(points, dtype=float))
    used = model.n_features
    if n_features is not None and x.shape[1] != n_features:
        raise ValueError(f"expected {n_features} columns, got {x.shape[1]}")
    if used is not None and x.shape[1] < used:
        raise ValueError(f"model splits on feature {used - 1} but points have {x.shape[1]} columns")
    out = np.full(x.shape[0], model.base_score, dtype=float)
    if model.trees:
        acc = np.zeros(x.shape[0])
        for tree in model.trees:
            acc += tree.predict(x)
        out += model.learning_rate * acc
    return out


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def fit_gbm(
    train: LabeledDataset,
    valid: LabeledDataset | None,
    depth: int,
    l2: float,
    rate: float,
    max_stages: int = 1000,
    patience: int = 5,
) -> GBMModel:
    """Stage-wise boosting with validation early stopping.

    Stops after ``patience`` stages without a strictly lower validation RMSE and
    truncates to the best stage. An empty or missing ``valid`` disables early
    stopping.
    """
    x, y = train.inputs, train.outputs
    if len(train) < 1:
        raise ValueError("empty training set")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("training data contain non-finite values")
    base = float(np.mean(y))
    model = GBMModel([], rate, l2, base, depth)
    order = np.argsort(x, axis=0, kind="stable")
    f_train = np.full(len(y), base)
    use_valid = valid is not None and len(valid) > 0
    if use_valid:
        if valid.dim != train.dim:
            raise ValueError("train and valid differ in feature count")
        f_valid = np.full(len(valid), base)
        stopper = EarlyStopping(patience, mode="min")
    for stage in range(1, max_stages + 1):
        tree = fit_tree(x, y - f_train, depth, l2, order)
        model.trees.append(tree)
        f_train = f_train + rate * tree.predict(x)
        model.train_rmse.append(_rmse(f_train, y))
        if use_valid:
            f_valid = f_valid + rate * tree.predict(valid.inputs)
            model.valid_rmse.append(_rmse(f_valid, valid.outputs))
            if stopper.update(stage, model.valid_rmse[-1]):
                break
    if use_valid:
        keep = stopper.best_step
        del model.trees[keep:]
    return model


def save_gbm(model: GBMModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model.to_json())


def load_gbm(path) -> GBMModel:
    with open(path, encoding="utf-8") as fh:
        return GBMModel.from_dict(json.load(fh))


# -- grid search ---------------------------------------------------------------


@dataclass(frozen=True)
class GridSearchSpec:
    depths: Sequence[int] = GRID_DEPTHS
    l2s: Sequence[float] = GRID_L2
    rates: Sequence[float] = GRID_RATES
    folds: int = 10

    def __post_init__(self):
        if not (self.depths and self.l2s and self.rates):
            raise ValueError("every grid axis needs at least one candidate")
        if self.folds < 2:
            raise ValueError("need at least two folds")

    def cells(self) -> list[tuple[int, float, float]]:
        return [(d, l, r) for d in self.depths for l in self.l2s for r in self.rates]


@dataclass(frozen=True)
class GridCell:
    depth: int
    l2: float
    rate: float
    mean_rmse: float
    std_rmse: float


@dataclass(frozen=True)
class GridSearchResult:
    best: tuple[int, float, float]
    cells: tuple[GridCell, ...]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["depth", "l2", "rate", "mean_rmse", "std_rmse"])
            for c in self.cells:
                w.writerow([c.depth, format_float(c.l2), format_float(c.rate),
                            format_float(c.mean_rmse), format_float(c.std_rmse)])


def kfold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Shuffled contiguous blocks; the remainder goes to the first folds."""
    if n < folds:
        raise ValueError(f"need at least {folds} rows for {folds}-fold CV, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = np.full(folds, n // folds)
    sizes[: n % folds] += 1
    bounds = np.r_[0, np.cumsum(sizes)]
    return [perm[bounds[k] : bounds[k + 1]] for k in range(folds)]


def grid_search(
    train: LabeledDataset,
    spec: GridSearchSpec,
    seed: int = 0,
    max_stages: int = 1000,
    patience: int = 5,
) -> GridSearchResult:
    """Score each grid cell by mean held-out RMSE over k folds.

    The held-out fold doubles as the early-stopping set. Best cell: lowest
    mean, then smaller depth, larger l2, smaller rate.
    """
    cells = spec.cells()
    if not cells:
        raise ValueError("empty grid")
    folds = kfold_indices(len(train), spec.folds, seed)
    all_idx = np.arange(len(train))
    results = []
    for depth, l2, rate in cells:
        scores = []
        for held in folds:
            fit_idx = np.setdiff1d(all_idx, held)
            tr, va = train.subset(fit_idx), train.subset(held)
            model = fit_gbm(tr, va, depth, l2, rate, max_stages, patience)
            scores.append(_rmse(predict_gbm(model, va.inputs), va.outputs))
        results.append(GridCell(depth, l2, rate, float(np.mean(scores)), float(np.std(scores))))
    best = min(results, key=lambda c: (c.mean_rmse, c.depth, -c.l2, c.rate))
    return GridSearchResult((best.depth, best.l2, best.rate), tuple(results))
