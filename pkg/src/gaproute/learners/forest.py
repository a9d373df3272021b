"""Random forest on hand-built CART trees.

Trees grow on bootstrap samples with per-split feature subsampling.
Regression splits minimize child sum-of-squared-error over all outputs and
leaves store target means; classification splits minimize Gini impurity and
leaves majority-vote (ties to the lowest class index). Everything is seeded:
tree t draws its own generator from (seed, t), so forests are reproducible
array-for-array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

TASK_REGRESS = "regress"
TASK_CLASSIFY = "classify"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = 16
    min_leaf: int = 2
    feature_subsample: int | str = "sqrt"
    bootstrap: bool = True
    seed: int = 0

    def snapshot(self) -> dict[str, Any]:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "feature_subsample": self.feature_subsample,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
        }

    def features_per_split(self, d: int) -> int:
        if self.feature_subsample == "sqrt":
            return max(1, int(round(math.sqrt(d))))
        if self.feature_subsample == "all":
            return d
        k = int(self.feature_subsample)
        if k < 1:
            raise ValueError("feature_subsample must be at least 1")
        return min(k, d)


class Tree:
    """Flat-array CART: feature[n] < 0 marks a leaf; leaf[n] is the payload
    row (mean vector for regression, one-hot class row for classification)."""

    __slots__ = ("feature", "threshold", "left", "right", "leaf")

    def __init__(self) -> None:
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf: list[np.ndarray] = []

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf.append(None)  # type: ignore[arg-type]
        return len(self.feature) - 1

    def finalize(self) -> None:
        width = next((row.shape[0] for row in self.leaf if row is not None), 0)
        payload = np.zeros((len(self.feature), width))
        for idx, row in enumerate(self.leaf):
            if row is not None:
                payload[idx] = row
        self.feature = np.asarray(self.feature, dtype=np.int64)  # type: ignore[assignment]
        self.threshold = np.asarray(self.threshold, dtype=np.float64)  # type: ignore[assignment]
        self.left = np.asarray(self.left, dtype=np.int64)  # type: ignore[assignment]
        self.right = np.asarray(self.right, dtype=np.int64)  # type: ignore[assignment]
        self.leaf = payload  # type: ignore[assignment]

    def apply(self, X: np.ndarray) -> np.ndarray:
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            feats = self.feature[nodes]
            active = feats >= 0
            if not active.any():
                return nodes
            rows = np.nonzero(active)[0]
            node_ids = nodes[rows]
            go_left = X[rows, feats[rows]] <= self.threshold[node_ids]
            nodes[rows] = np.where(go_left, self.left[node_ids], self.right[node_ids])

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        return self.leaf[self.apply(X)]


def _best_split(
    X: np.ndarray,
    Y: np.ndarray,
    rows: np.ndarray,
    features: np.ndarray,
    min_leaf: int,
    task: str,
) -> tuple[int, float] | None:
    """Lowest-cost (feature, threshold) over the sampled features, or None.

    Cost is total child SSE for regression and count-weighted child Gini for
    classification, both computed with prefix sums over the sorted column.
    """
    n = rows.shape[0]
    best_cost = np.inf
    best: tuple[int, float] | None = None
    y = Y[rows]

    for feat in features:
        column = X[rows, feat]
        order = np.argsort(column, kind="stable")
        sorted_col = column[order]
        sorted_y = y[order]

        # Splittable positions: value changes AND both children >= min_leaf.
        change = sorted_col[:-1] < sorted_col[1:]
        positions = np.nonzero(change)[0]
        positions = positions[(positions + 1 >= min_leaf) & (n - positions - 1 >= min_leaf)]
        if positions.size == 0:
            continue

        if task == TASK_REGRESS:
            cum = np.cumsum(sorted_y, axis=0)
            cum_sq = np.cumsum(sorted_y * sorted_y, axis=0)
            total = cum[-1]
            total_sq = cum_sq[-1]
            n_left = (positions + 1).astype(np.float64)
            n_right = n - n_left
            sum_l = cum[positions]
            sq_l = cum_sq[positions]
            sse_l = (sq_l - sum_l * sum_l / n_left[:, None]).sum(axis=1)
            sum_r = total - sum_l
            sq_r = total_sq - sq_l
            sse_r = (sq_r - sum_r * sum_r / n_right[:, None]).sum(axis=1)
            costs = sse_l + sse_r
        else:
            cum = np.cumsum(sorted_y, axis=0)
            total = cum[-1]
            n_left = (positions + 1).astype(np.float64)
            n_right = n - n_left
            counts_l = cum[positions]
            counts_r = total - counts_l
            gini_l = n_left - (counts_l * counts_l).sum(axis=1) / n_left
            gini_r = n_right - (counts_r * counts_r).sum(axis=1) / n_right
            costs = gini_l + gini_r

        idx = int(np.argmin(costs))
        if costs[idx] < best_cost - 1e-12:
            best_cost = float(costs[idx])
            pos = positions[idx]
            threshold = (sorted_col[pos] + sorted_col[pos + 1]) / 2.0
            best = (int(feat), float(threshold))
    return best


def _grow(
    tree: Tree,
    X: np.ndarray,
    Y: np.ndarray,
    rows: np.ndarray,
    depth: int,
    cfg: ForestConfig,
    task: str,
    rng: np.random.Generator,
    k_features: int,
) -> int:
    node = tree.add_node()
    y = Y[rows]

    def make_leaf() -> int:
        if task == TASK_REGRESS:
            tree.leaf[node] = y.mean(axis=0)
        else:
            counts = y.sum(axis=0)
            winner = int(np.argmax(counts))  # argmax takes lowest index on ties
            payload = np.zeros(Y.shape[1])
            payload[winner] = 1.0
            tree.leaf[node] = payload
        return node

    pure = bool((y == y[0]).all())
    depth_stop = cfg.max_depth is not None and depth >= cfg.max_depth
    if pure or depth_stop or rows.shape[0] < 2 * cfg.min_leaf:
        return make_leaf()

    features = rng.choice(X.shape[1], size=k_features, replace=False)
    split = _best_split(X, Y, rows, features, cfg.min_leaf, task)
    if split is None:
        return make_leaf()

    feat, threshold = split
    mask = X[rows, feat] <= threshold
    tree.feature[node] = feat
    tree.threshold[node] = threshold
    tree.left[node] = _grow(tree, X, Y, rows[mask], depth + 1, cfg, task, rng, k_features)
    tree.right[node] = _grow(tree, X, Y, rows[~mask], depth + 1, cfg, task, rng, k_features)
    return node


@dataclass(eq=False)
class RandomForestModel:
    kind = "random_forest"
    task: str
    roster: tuple[str, ...]
    classes: tuple[Any, ...] | None
    input_dim: int
    trees: list[Tree]
    config: dict[str, Any] = field(default_factory=dict)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.input_dim:
            raise ValueError(
                f"embedding dim {X.shape[1]} does not match model dim {self.input_dim}"
            )
        return X

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Regression: mean of leaf means. Classification: majority vote,
        ties to the lowest class index; returns class labels."""
        single = np.asarray(X).ndim == 1
        X = self._check(X)
        stacked = np.stack([tree.predict_rows(X) for tree in self.trees])
        votes = stacked.mean(axis=0)
        if self.task == TASK_REGRESS:
            return votes[0] if single else votes
        winners = np.argmax(votes, axis=1)
        labels = np.asarray(self.classes, dtype=object)[winners]
        return labels[0] if single else labels

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.task != TASK_CLASSIFY:
            raise ValueError("predict_proba is for classifiers")
        single = np.asarray(X).ndim == 1
        X = self._check(X)
        stacked = np.stack([tree.predict_rows(X) for tree in self.trees])
        votes = stacked.mean(axis=0)
        return votes[0] if single else votes


def train_random_forest(
    X: np.ndarray,
    targets: np.ndarray | Sequence[Any],
    config: ForestConfig | None = None,
    task: str = TASK_REGRESS,
    roster: Sequence[str] = (),
    classes: Sequence[Any] | None = None,
) -> RandomForestModel:
    """Grow a seeded forest. Classification targets may be labels of any
    hashable type; the class order (given or sorted-unique) fixes vote
    tie-breaking and the probability column layout."""
    cfg = config or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2-d")
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two training rows")
    if n < cfg.min_leaf:
        raise ValueError("fewer rows than min_leaf")
    if not np.isfinite(X).all():
        raise ValueError("non-finite training values")

    class_list: tuple[Any, ...] | None = None
    if task == TASK_CLASSIFY:
        labels = list(targets)
        if classes is None:
            class_list = tuple(sorted(set(labels)))
        else:
            class_list = tuple(classes)
        index = {c: i for i, c in enumerate(class_list)}
        Y = np.zeros((n, len(class_list)))
        for row, label in enumerate(labels):
            Y[row, index[label]] = 1.0
    elif task == TASK_REGRESS:
        Y = np.asarray(targets, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if not np.isfinite(Y).all():
            raise ValueError("non-finite training values")
    else:
        raise ValueError(f"unknown task {task!r}")
    if Y.shape[0] != n:
        raise ValueError("X and target row counts differ")

    k_features = cfg.features_per_split(d)
    trees: list[Tree] = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, t])
        rows = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        tree = Tree()
        _grow(tree, X, Y, rows, 0, cfg, task, rng, k_features)
        tree.finalize()
        trees.append(tree)

    roster = tuple(roster) if roster else tuple(f"expert{k}" for k in range(Y.shape[1]))
    return RandomForestModel(
        task=task,
        roster=roster if task == TASK_REGRESS else (),
        classes=class_list,
        input_dim=d,
        trees=trees,
        config=cfg.snapshot(),
    )
