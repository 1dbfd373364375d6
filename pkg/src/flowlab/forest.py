"""From-scratch random forest classifier.

Bootstrap-sampled decision trees grown by best-Gini-gain splits over random
feature subsets, voting by plurality. Training is deterministic for a given
(dataset, config) pair: each tree derives its own RNG from the config seed
and the tree index, so serial and parallel training produce identical
forests.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset
from .errors import EmptyDatasetError, SchemaMismatchError
from .meter import FEATURE_NAMES, FeatureVector

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def tree_seed(seed: int, index: int) -> int:
    """Sub-seed for tree ``index``: a splitmix-style 64-bit mix of both."""
    return _splitmix64((seed & _MASK64) + ((index + 1) * _GOLDEN & _MASK64) & _MASK64)


def gini_impurity(labels: Sequence) -> float:
    """1 - sum of squared class probabilities of a label multiset."""
    if len(labels) == 0:
        return 0.0
    counts: dict = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    n = len(labels)
    return 1.0 - sum((c / n) ** 2 for c in counts.values())


@dataclass(frozen=True, slots=True)
class Leaf:
    label_index: int


@dataclass(frozen=True, slots=True)
class Internal:
    """Routes a sample left iff x[feature_index] <= threshold."""

    feature_index: int
    threshold: float
    left: Leaf | Internal
    right: Leaf | Internal


TreeNode = Leaf | Internal


@dataclass(frozen=True)
class TrainConfig:
    """Forest hyperparameters; defaults follow common practice."""

    n_trees: int = 100
    max_features: int | str = "sqrt"
    min_samples_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if isinstance(self.max_features, int) and self.max_features < 1:
            raise ValueError("max_features must be >= 1")
        if self.max_features == "sqrt":
            pass
        elif not isinstance(self.max_features, int):
            raise ValueError(f"unsupported max_features {self.max_features!r}")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")

    def resolve_max_features(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        return min(self.max_features, n_features)

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_features": self.max_features,
            "min_samples_leaf": self.min_samples_leaf,
            "max_depth": self.max_depth,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class RandomForest:
    trees: tuple[TreeNode, ...]
    feature_schema: tuple[str, ...]
    labels: tuple[str, ...]  # sorted; vote ties resolve to the smallest index
    train_config: TrainConfig = field(default_factory=TrainConfig)


def _grow(
    X: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    n_labels: int,
    rng: np.random.Generator,
    config: TrainConfig,
    depth: int,
) -> TreeNode:
    counts = np.bincount(y[idx], minlength=n_labels)
    majority = int(counts.argmax())
    n = len(idx)
    if (
        np.count_nonzero(counts) <= 1
        or (config.max_depth is not None and depth >= config.max_depth)
        or n < 2 * config.min_samples_leaf
    ):
        return Leaf(majority)

    parent_gini = 1.0 - float(((counts / n) ** 2).sum())
    m = config.resolve_max_features(X.shape[1])
    features = rng.choice(X.shape[1], size=m, replace=False)

    best_gain = 0.0
    best_feature = -1
    best_threshold = 0.0
    msl = config.min_samples_leaf
    for f in features:
        vals = X[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        sy = y[idx][order]
        boundaries = np.nonzero(sv[1:] != sv[:-1])[0]
        if boundaries.size == 0:
            continue
        onehot = np.zeros((n, n_labels))
        onehot[np.arange(n), sy] = 1.0
        cum = onehot.cumsum(axis=0)
        left = cum[boundaries]
        right = counts - left
        n_left = (boundaries + 1).astype(float)
        n_right = n - n_left
        valid = (n_left >= msl) & (n_right >= msl)
        if not valid.any():
            continue
        gini_left = 1.0 - (left**2).sum(axis=1) / n_left**2
        gini_right = 1.0 - (right**2).sum(axis=1) / n_right**2
        weighted = (n_left * gini_left + n_right * gini_right) / n
        gains = np.where(valid, parent_gini - weighted, -1.0)
        b = int(gains.argmax())
        if gains[b] > best_gain:
            best_gain = float(gains[b])
            best_feature = int(f)
            best_threshold = float((sv[b] + sv[b + 1]) / 2)

    if best_feature < 0:
        return Leaf(majority)

    mask = X[idx, best_feature] <= best_threshold
    left_idx = idx[mask]
    right_idx = idx[~mask]
    return Internal(
        feature_index=best_feature,
        threshold=best_threshold,
        left=_grow(X, y, left_idx, n_labels, rng, config, depth + 1),
        right=_grow(X, y, right_idx, n_labels, rng, config, depth + 1),
    )


def _build_tree(
    X: np.ndarray, y: np.ndarray, n_labels: int, config: TrainConfig, index: int
) -> TreeNode:
    rng = np.random.Generator(np.random.PCG64(tree_seed(config.seed, index)))
    n = len(y)
    if config.bootstrap:
        idx = rng.integers(0, n, size=n)
    else:
        idx = np.arange(n)
    return _grow(X, y, idx, n_labels, rng, config, depth=0)


def dataset_matrix(ds: Dataset) -> tuple[np.ndarray, list[str]]:
    """Feature matrix and label list of a dataset, in flow order."""
    X = np.array([f.features.as_tuple() for f in ds.flows], dtype=float)
    return X.reshape(len(ds.flows), len(ds.feature_schema)), [f.label for f in ds.flows]


def train(ds: Dataset, config: TrainConfig | None = None, n_jobs: int = 1) -> RandomForest:
    """Train a forest; bit-identical results for any ``n_jobs``."""
    if config is None:
        config = TrainConfig()
    if len(ds.flows) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    X, label_list = dataset_matrix(ds)
    labels = tuple(sorted(set(label_list)))
    label_to_index = {label: i for i, label in enumerate(labels)}
    y = np.array([label_to_index[label] for label in label_list], dtype=np.int64)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = tuple(
                pool.map(
                    lambda i: _build_tree(X, y, len(labels), config, i),
                    range(config.n_trees),
                )
            )
    else:
        trees = tuple(
            _build_tree(X, y, len(labels), config, i) for i in range(config.n_trees)
        )
    return RandomForest(
        trees=trees,
        feature_schema=ds.feature_schema,
        labels=labels,
        train_config=config,
    )


def _route_tree(node: TreeNode, X: np.ndarray, rows: np.ndarray, out: np.ndarray) -> None:
    if isinstance(node, Leaf):
        out[rows] = node.label_index
        return
    mask = X[rows, node.feature_index] <= node.threshold
    left_rows = rows[mask]
    right_rows = rows[~mask]
    if left_rows.size:
        _route_tree(node.left, X, left_rows, out)
    if right_rows.size:
        _route_tree(node.right, X, right_rows, out)


def predict_matrix(forest: RandomForest, X: np.ndarray) -> list[str]:
    """Predict labels for a feature matrix (rows match the schema order)."""
    if X.ndim != 2 or X.shape[1] != len(forest.feature_schema):
        raise SchemaMismatchError(
            f"expected {len(forest.feature_schema)} features, got {X.shape}"
        )
    n = X.shape[0]
    votes = np.zeros((n, len(forest.labels)), dtype=np.int64)
    out = np.empty(n, dtype=np.int64)
    rows = np.arange(n)
    for tree in forest.trees:
        _route_tree(tree, X, rows, out)
        votes[rows, out] += 1
    # argmax keeps the first maximum: ties go to the smallest label index,
    # which is the lexicographically smallest label.
    winners = votes.argmax(axis=1)
    return [forest.labels[i] for i in winners]


def _as_row(forest: RandomForest, x) -> np.ndarray:
    if isinstance(x, FeatureVector):
        if forest.feature_schema != FEATURE_NAMES:
            raise SchemaMismatchError("forest schema does not match FeatureVector")
        return np.array(x.as_tuple(), dtype=float)
    row = np.asarray(x, dtype=float)
    if row.shape != (len(forest.feature_schema),):
        raise SchemaMismatchError(
            f"expected {len(forest.feature_schema)} features, got {row.shape}"
        )
    return row


def predict(forest: RandomForest, x) -> str:
    """Predict one sample (a FeatureVector or a schema-ordered sequence)."""
    return predict_matrix(forest, _as_row(forest, x).reshape(1, -1))[0]


def predict_batch(forest: RandomForest, xs: Iterable) -> list[str]:
    rows = [_as_row(forest, x) for x in xs]
    if not rows:
        return []
    return predict_matrix(forest, np.stack(rows))


def _node_to_dict(node: TreeNode, labels: tuple[str, ...]) -> dict:
    if isinstance(node, Leaf):
        return {"label": labels[node.label_index]}
    return {
        "feature_index": node.feature_index,
        "threshold": node.threshold,
        "left": _node_to_dict(node.left, labels),
        "right": _node_to_dict(node.right, labels),
    }


def _node_from_dict(data: dict, label_to_index: dict[str, int]) -> TreeNode:
    if "label" in data:
        return Leaf(label_to_index[data["label"]])
    return Internal(
        feature_index=int(data["feature_index"]),
        threshold=float(data["threshold"]),
        left=_node_from_dict(data["left"], label_to_index),
        right=_node_from_dict(data["right"], label_to_index),
    )


def save_model(forest: RandomForest, path) -> None:
    """Persist a forest as a JSON document of nested split nodes."""
    doc = {
        "labels": list(forest.labels),
        "feature_schema": list(forest.feature_schema),
        "train_config": forest.train_config.to_dict(),
        "trees": [_node_to_dict(t, forest.labels) for t in forest.trees],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> RandomForest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    labels = tuple(doc["labels"])
    label_to_index = {label: i for i, label in enumerate(labels)}
    config = doc.get("train_config", {})
    return RandomForest(
        trees=tuple(_node_from_dict(t, label_to_index) for t in doc["trees"]),
        feature_schema=tuple(doc["feature_schema"]),
        labels=labels,
        train_config=TrainConfig(**config),
    )
