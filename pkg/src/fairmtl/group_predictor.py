"""Random-forest predictor of the sensitive group from the non-sensitive features.

The trees are grown by scikit-learn; prediction walks the extracted tree
arrays and takes a hard majority vote, ties going to the smallest group id.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .dataset import Dataset, stratified_folds
from .model import ModelSpec, ParamVector, scores


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    max_features: int | None = None  # None means ceil(sqrt(d))
    class_weight: str = "balanced"   # or "none"
    bootstrap_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0 < self.bootstrap_fraction <= 1:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        if self.class_weight not in ("balanced", "none"):
            raise ValueError("class_weight must be 'balanced' or 'none'")


@dataclass(frozen=True, eq=False)
class Tree:
    left: np.ndarray       # child ids, -1 at leaves
    right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    leaf_group: np.ndarray  # group id voted by each leaf, 0 at internal nodes

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        live = np.flatnonzero(self.left[node] >= 0)
        while len(live):
            at = node[live]
            go_left = X[live, self.feature[at]] <= self.threshold[at]
            node[live] = np.where(go_left, self.left[at], self.right[at])
            live = live[self.left[node[live]] >= 0]
        return self.leaf_group[node]


@dataclass(frozen=True, eq=False)
class GroupPredictor:
    trees: tuple[Tree, ...]
    k: int
    n_features: int

    def votes(self, X) -> np.ndarray:
        X = self._check(X)
        counts = np.zeros((len(X), self.k), dtype=np.int64)
        rows = np.arange(len(X))
        for tree in self.trees:
            counts[rows, tree.predict(X) - 1] += 1
        return counts

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, i.e. the smallest group id on ties
        return np.argmax(self.votes(X), axis=1) + 1

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(json.dumps({"k": self.k, "n_features": self.n_features,
                              "n_trees": len(self.trees)}, sort_keys=True) + "\n")
        for i, t in enumerate(self.trees):
            buf.write(f"tree {i} {len(t.left)}\n")
            for row in zip(t.left, t.right, t.feature, t.threshold, t.leaf_group):
                buf.write(f"{row[0]} {row[1]} {row[2]} {float(row[3])!r} {row[4]}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "GroupPredictor":
        lines = text.splitlines()
        meta = json.loads(lines[0])
        trees, pos = [], 1
        for _ in range(meta["n_trees"]):
            size = int(lines[pos].split()[2])
            body = [ln.split() for ln in lines[pos + 1:pos + 1 + size]]
            pos += 1 + size
            cols = list(zip(*body))
            trees.append(Tree(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                              np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=float),
                              np.array(cols[4], dtype=np.int64)))
        return cls(tuple(trees), meta["k"], meta["n_features"])


def _extract(est, classes: np.ndarray) -> Tree:
    t = est.tree_
    leaf = t.children_left < 0
    # each tree votes for the group with the largest weighted share in the leaf
    best = np.argmax(t.value[:, 0, :], axis=1)
    leaf_group = np.where(leaf, classes[best], 0).astype(np.int64)
    return Tree(t.children_left.astype(np.int64), t.children_right.astype(np.int64),
                np.where(leaf, 0, t.feature).astype(np.int64), t.threshold.astype(float),
                leaf_group)


def fit_group_predictor(X, groups, config: ForestConfig | None = None,
                        k: int | None = None) -> GroupPredictor:
    config = config or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    k = int(groups.max()) if k is None else k
    counts = np.bincount(groups - 1, minlength=k)
    if np.count_nonzero(counts) < 2:
        raise ValueError("the group predictor needs at least two groups in its training data")
    if config.class_weight == "balanced":
        present = counts > 0
        weight = np.zeros(k)
        weight[present] = len(groups) / (present.sum() * counts[present])
        sample_weight = weight[groups - 1]
    else:
        sample_weight = None
    max_features = config.max_features or math.ceil(math.sqrt(X.shape[1]))
    forest = RandomForestClassifier(n_estimators=config.n_trees, max_depth=config.max_depth,
                                    max_features=max_features, random_state=config.seed,
                                    max_samples=(None if config.bootstrap_fraction == 1
                                                 else config.bootstrap_fraction))
    forest.fit(X, groups, sample_weight=sample_weight)
    trees = tuple(_extract(est, forest.classes_) for est in forest.estimators_)
    return GroupPredictor(trees, k, X.shape[1])


def predict_training_groups(data: Dataset, config: ForestConfig | None = None,
                            out_of_fold: bool = False, n_folds: int = 10):
    """Fit ``g`` on ``data`` and return it with its predictions on ``data``.

    By default the predictions are in-sample.  With ``out_of_fold`` each
    sample is predicted by a forest that did not see it.
    """
    config = config or ForestConfig()
    X = data.base_features()
    predictor = fit_group_predictor(X, data.groups, config, data.k)
    if not out_of_fold:
        return predictor, predictor.predict(X)
    pred = np.zeros(data.n, dtype=np.int64)
    for tr, va in stratified_folds(data, n_folds, config.seed):
        g = fit_group_predictor(X[tr], data.groups[tr], config, data.k)
        pred[va] = g.predict(X[va])
    return predictor, pred


def confusion_matrix(predicted, true, k: int) -> np.ndarray:
    """Percent of all samples per (predicted, true) pair; rows are predicted groups."""
    predicted, true = np.asarray(predicted), np.asarray(true)
    counts = np.zeros((k, k))
    np.add.at(counts, (predicted - 1, true - 1), 1)
    return 100.0 * counts / len(true)


def confusion_csv(matrix: np.ndarray, group_names) -> str:
    buf = io.StringIO()
    buf.write("predicted\\true," + ",".join(group_names) + "\n")
    for name, row in zip(group_names, matrix):
        buf.write(name + "," + ",".join(f"{v:.2f}" for v in row) + "\n")
    return buf.getvalue()


@dataclass(frozen=True)
class BandRow:
    band: float
    count: int
    accuracy: float  # percent; nan for an empty band


def margin_band_accuracy(predicted, true, params: ParamVector, spec: ModelSpec, X,
                         bands=(0.1, 0.2, 0.3, 0.5, 1.0, math.inf)) -> list[BandRow]:
    """Accuracy of ``g`` among samples within each distance of the model's separator.

    The distance is ``|f(x)| / ||w||`` where ``w`` is the active weight
    vector of the sample's predicted group without its bias coordinate.
    """
    predicted, true = np.asarray(predicted), np.asarray(true)
    X = np.asarray(X, dtype=float)
    f = scores(params, X, predicted, spec)
    if spec.group_specific_prediction:
        W = params.task_weights()[:, :-1]
        norms = np.linalg.norm(W, axis=1)[predicted - 1]
    else:
        norms = np.full(len(f), np.linalg.norm(params.w0[:-1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(norms > 0, np.abs(f) / norms, np.inf)
    correct = predicted == true
    rows = []
    for band in bands:
        sel = dist <= band
        acc = 100.0 * correct[sel].mean() if sel.any() else float("nan")
        rows.append(BandRow(float(band), int(sel.sum()), float(acc)))
    return rows


def band_csv(rows: list[BandRow]) -> str:
    buf = io.StringIO()
    buf.write("band,count,accuracy\n")
    for r in rows:
        buf.write(f"{r.band!r},{r.count},{r.accuracy!r}\n")
    return buf.getvalue()


__all__ = ["ForestConfig", "GroupPredictor", "Tree", "fit_group_predictor",
           "predict_training_groups", "confusion_matrix", "confusion_csv",
           "margin_band_accuracy", "band_csv", "BandRow"]
