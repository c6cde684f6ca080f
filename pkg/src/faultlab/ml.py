"""Window classifiers and their evaluation.

A small, dependency-free CART implementation and a random forest on top
of it, built for the feature vectors produced by the feature pipeline:
a few hundred numeric columns, a handful of classes, and the need for
deterministic refits under a seed.

Split search is exhaustive per candidate feature: thresholds are the
midpoints between consecutive distinct sorted values, scored by Gini
impurity decrease. Ties keep the first candidate encountered, so fits
are reproducible. Forest votes break ties toward the smallest class
index, i.e. the lexicographically first label.

Evaluation intentionally offers two fold orders. "shuffled" is the
usual optimistic estimate; "time" cuts folds as contiguous blocks in
window order, which is the honest number for an online detector that
can only train on the past.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "gini_impurity",
    "TreeNode",
    "DecisionTree",
    "RandomForest",
    "ClassScore",
    "Scores",
    "score_classification",
    "FoldScore",
    "CVResult",
    "cross_validate",
    "pool_core_windows",
    "schema_hash",
    "save_model",
    "load_model",
]

_MIN_DECREASE = 1e-12  # splits must actually improve impurity


def gini_impurity(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p * p).sum())


@dataclass
class TreeNode:
    feature: int = -1  # -1 marks a leaf
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    prediction: int = -1


class DecisionTree:
    """CART classifier on float features and string labels."""

    def __init__(self, max_depth: int = 20, min_samples_leaf: int = 1,
                 max_features: int | None = None, rng: np.random.Generator | None = None):
        if max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.rng = rng
        self.classes: list[str] = []
        self.root: TreeNode | None = None
        self.n_features = 0
        self._importance: np.ndarray | None = None
        self._n_total = 0

    def fit(self, X, y, classes: list[str] | None = None) -> "DecisionTree":
        X = np.asarray(X, dtype=np.float64)
        self.classes = list(classes) if classes is not None else sorted(set(y))
        lookup = {c: i for i, c in enumerate(self.classes)}
        y_idx = np.fromiter((lookup[v] for v in y), dtype=np.intp, count=len(y))
        return self.fit_indexed(X, y_idx, self.classes)

    def fit_indexed(self, X: np.ndarray, y_idx: np.ndarray, classes: list[str]) -> "DecisionTree":
        if len(X) != len(y_idx) or len(X) == 0:
            raise ValueError("X and y must be non-empty and the same length")
        self.classes = list(classes)
        self.n_features = X.shape[1]
        self._n_total = len(y_idx)
        self._importance = np.zeros(self.n_features)
        self.root = self._grow(X, y_idx, depth=0)
        return self

    def _grow(self, X: np.ndarray, y: np.ndarray, depth: int) -> TreeNode:
        counts = np.bincount(y, minlength=len(self.classes))
        majority = int(np.argmax(counts))  # first max: smallest class index
        n = len(y)
        if (
            depth >= self.max_depth
            or n < 2 * self.min_samples_leaf
            or counts[majority] == n
        ):
            return TreeNode(prediction=majority)
        best = self._best_split(X, y, counts)
        if best is None:
            return TreeNode(prediction=majority)
        f, threshold, decrease = best
        self._importance[f] += (n / self._n_total) * decrease
        mask = X[:, f] <= threshold
        return TreeNode(
            feature=f,
            threshold=threshold,
            left=self._grow(X[mask], y[mask], depth + 1),
            right=self._grow(X[~mask], y[~mask], depth + 1),
            prediction=majority,
        )

    def _candidate_features(self) -> np.ndarray:
        if self.max_features is None or self.max_features >= self.n_features:
            return np.arange(self.n_features)
        if self.rng is None:
            raise ValueError("feature subsampling needs an rng")
        picked = self.rng.choice(self.n_features, size=self.max_features, replace=False)
        return np.sort(picked)

    def _best_split(self, X, y, parent_counts):
        n = len(y)
        k = len(self.classes)
        parent_gini = gini_impurity(parent_counts)
        msl = self.min_samples_leaf
        best = None
        best_dec = _MIN_DECREASE
        for f in self._candidate_features():
            xs = X[:, f]
            order = np.argsort(xs, kind="stable")
            xs_s = xs[order]
            onehot = np.zeros((n, k))
            onehot[np.arange(n), y[order]] = 1.0
            cum = onehot.cumsum(axis=0)
            sizes = np.arange(msl, n - msl + 1)
            sizes = sizes[xs_s[sizes - 1] < xs_s[sizes]]  # only between distinct values
            if len(sizes) == 0:
                continue
            n_left = sizes.astype(np.float64)
            n_right = n - n_left
            c_left = cum[sizes - 1]
            c_right = parent_counts - c_left
            gini_left = 1.0 - (c_left**2).sum(axis=1) / n_left**2
            gini_right = 1.0 - (c_right**2).sum(axis=1) / n_right**2
            dec = parent_gini - (n_left * gini_left + n_right * gini_right) / n
            j = int(np.argmax(dec))
            if dec[j] > best_dec:  # strictly better: first-best wins ties
                best_dec = float(dec[j])
                threshold = float((xs_s[sizes[j] - 1] + xs_s[sizes[j]]) / 2.0)
                best = (int(f), threshold, best_dec)
        return best

    def predict_idx(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(len(X), dtype=np.intp)
        for i, row in enumerate(X):
            node = self.root
            while node.feature >= 0:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[i] = node.prediction
        return out

    def predict(self, X) -> np.ndarray:
        idx = self.predict_idx(X)
        return np.array([self.classes[i] for i in idx], dtype=object)


class RandomForest:
    """Bagged CART trees with per-split feature subsampling.

    Seeding goes through numpy's SeedSequence spawning, so every tree
    gets an independent stream and the whole fit replays exactly.
    """

    def __init__(
        self,
        n_trees: int = 30,
        max_depth: int = 20,
        min_samples_leaf: int = 1,
        max_features="sqrt",
        bootstrap: bool = True,
        seed: int | None = None,
    ):
        if n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.bootstrap = bootstrap
        self.seed = seed
        self.classes: list[str] = []
        self.trees: list[DecisionTree] = []
        self.n_features = 0

    def _resolve_max_features(self, n_features: int) -> int | None:
        if self.max_features is None:
            return None
        if self.max_features == "sqrt":
            return max(1, int(math.sqrt(n_features)))
        return min(int(self.max_features), n_features)

    def fit(self, X, y) -> "RandomForest":
        X = np.asarray(X, dtype=np.float64)
        y = list(y)
        if len(X) != len(y) or len(y) == 0:
            raise ValueError("X and y must be non-empty and the same length")
        self.classes = sorted(set(y))
        lookup = {c: i for i, c in enumerate(self.classes)}
        y_idx = np.fromiter((lookup[v] for v in y), dtype=np.intp, count=len(y))
        self.n_features = X.shape[1]
        per_split = self._resolve_max_features(self.n_features)
        self.trees = []
        n = len(y)
        for seq in np.random.SeedSequence(self.seed).spawn(self.n_trees):
            rng = np.random.default_rng(seq)
            idx = rng.integers(0, n, size=n) if self.bootstrap else np.arange(n)
            tree = DecisionTree(
                max_depth=self.max_depth,
                min_samples_leaf=self.min_samples_leaf,
                max_features=per_split,
                rng=rng,
            )
            tree.fit_indexed(X[idx], y_idx[idx], self.classes)
            self.trees.append(tree)
        return self

    def predict_idx(self, X) -> np.ndarray:
        if not self.trees:
            raise ValueError("forest is not fitted")
        votes = np.stack([t.predict_idx(X) for t in self.trees])
        k = len(self.classes)
        out = np.empty(votes.shape[1], dtype=np.intp)
        for j in range(votes.shape[1]):
            out[j] = int(np.argmax(np.bincount(votes[:, j], minlength=k)))
        return out

    def predict(self, X) -> np.ndarray:
        return np.array([self.classes[i] for i in self.predict_idx(X)], dtype=object)

    def feature_importances(self) -> np.ndarray:
        raw = np.mean([t._importance for t in self.trees], axis=0)
        total = raw.sum()
        return raw / total if total > 0 else raw


# --- scoring ------------------------------------------------------------------


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class Scores:
    classes: list[str]  # union of truth and prediction, sorted
    per_class: dict[str, ClassScore]  # keyed by classes present in y_true
    macro_f: float
    weighted_f: float
    accuracy: float
    confusion: np.ndarray  # (k, k), rows = truth


def score_classification(y_true, y_pred) -> Scores:
    y_true = list(y_true)
    y_pred = list(y_pred)
    if len(y_true) != len(y_pred) or not y_true:
        raise ValueError("need equal-length, non-empty label sequences")
    classes = sorted(set(y_true) | set(y_pred))
    index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[index[t], index[p]] += 1

    per_class: dict[str, ClassScore] = {}
    for c in classes:
        i = index[c]
        support = int(confusion[i].sum())
        if support == 0:
            continue  # predicted-only classes do not enter the averages
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum()) - tp
        fn = support - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = ClassScore(precision, recall, f1, support)

    total = len(y_true)
    macro_f = float(np.mean([s.f1 for s in per_class.values()]))
    weighted_f = float(
        sum(s.f1 * s.support for s in per_class.values()) / total
    )
    accuracy = float(np.trace(confusion) / total)
    return Scores(
        classes=classes,
        per_class=per_class,
        macro_f=macro_f,
        weighted_f=weighted_f,
        accuracy=accuracy,
        confusion=confusion,
    )


# --- cross validation ------------------------------------------------------------


@dataclass
class FoldScore:
    fold: int
    test_size: int
    test_indices: np.ndarray
    scores: Scores


@dataclass
class CVResult:
    order: str
    n_folds: int
    folds: list[FoldScore]
    macro_f: float  # mean of the fold macro F scores
    weighted_f: float
    accuracy: float


def cross_validate(
    X,
    y,
    window_ends=None,
    n_folds: int = 5,
    order: str = "time",
    seed: int = 0,
    model_factory=None,
) -> CVResult:
    """K-fold evaluation in either time order or shuffled order.

    Time order sorts rows by window end and cuts contiguous folds, so a
    test fold is a stretch of session the model never saw around its
    training data. Shuffled order is the conventional estimate.
    """
    X = np.asarray(X, dtype=np.float64)
    y = list(y)
    n = len(y)
    if n < n_folds:
        raise ValueError(f"{n} rows cannot fill {n_folds} folds")
    if model_factory is None:
        model_factory = lambda: RandomForest(seed=seed)
    if order == "time":
        if window_ends is not None:
            idx = np.argsort(np.asarray(window_ends), kind="stable")
        else:
            idx = np.arange(n)
    elif order == "shuffled":
        idx = np.random.default_rng(seed).permutation(n)
    else:
        raise ValueError(f"unknown fold order {order!r}")

    parts = np.array_split(idx, n_folds)
    folds: list[FoldScore] = []
    for i, test_idx in enumerate(parts):
        if len(test_idx) == 0:
            continue
        train_idx = np.concatenate([p for j, p in enumerate(parts) if j != i])
        model = model_factory()
        model.fit(X[train_idx], [y[j] for j in train_idx])
        pred = model.predict(X[test_idx])
        scores = score_classification([y[j] for j in test_idx], list(pred))
        folds.append(
            FoldScore(fold=i, test_size=len(test_idx), test_indices=test_idx, scores=scores)
        )
    return CVResult(
        order=order,
        n_folds=n_folds,
        folds=folds,
        macro_f=float(np.mean([f.scores.macro_f for f in folds])),
        weighted_f=float(np.mean([f.scores.weighted_f for f in folds])),
        accuracy=float(np.mean([f.scores.accuracy for f in folds])),
    )


# --- dataset assembly --------------------------------------------------------------


_CORE_VIEW_RE = re.compile(r"core(\d+)$")


def pool_core_windows(sets: dict, seed: int = 0, label: str = "mode", drop_ambiguous: bool = False):
    """One training row per window: a random core's feature vector.

    Cores on one node see near-identical node-level load, so using every
    core's row for every window would just clone samples; sampling one
    core per window keeps windows independent. Returns (X, labels,
    window_ends).
    """
    if label not in ("mode", "recent"):
        raise ValueError("label must be 'mode' or 'recent'")
    views = sorted(
        (v for v in sets if _CORE_VIEW_RE.fullmatch(v)),
        key=lambda v: int(_CORE_VIEW_RE.fullmatch(v).group(1)),
    )
    if not views:
        raise ValueError("no core views in the feature sets")
    names = sets[views[0]].feature_names
    for v in views[1:]:
        if sets[v].feature_names != names:
            raise ValueError(f"feature names of {v} do not line up with {views[0]}")
    end_index = {v: {int(e): i for i, e in enumerate(sets[v].window_ends)} for v in views}
    common = sorted(set.intersection(*(set(m) for m in end_index.values())))
    rng = np.random.default_rng(seed)
    rows, labels, ends = [], [], []
    for end in common:
        view = views[int(rng.integers(len(views)))]
        fs = sets[view]
        i = end_index[view][end]
        if drop_ambiguous and fs.ambiguous[i]:
            continue
        rows.append(fs.X[i])
        labels.append(fs.labels_mode[i] if label == "mode" else fs.labels_recent[i])
        ends.append(end)
    if not rows:
        return np.empty((0, len(names))), [], np.empty(0, dtype=np.int64)
    return np.vstack(rows), labels, np.array(ends, dtype=np.int64)


# --- persistence ---------------------------------------------------------------------


def schema_hash(feature_names) -> str:
    digest = hashlib.sha256("\n".join(feature_names).encode("utf-8")).hexdigest()
    return digest[:16]


def _node_to_obj(node: TreeNode):
    if node.feature < 0:
        return {"c": node.prediction}
    return {
        "f": node.feature,
        "t": node.threshold,
        "l": _node_to_obj(node.left),
        "r": _node_to_obj(node.right),
    }


def _node_from_obj(obj) -> TreeNode:
    if "c" in obj:
        return TreeNode(prediction=int(obj["c"]))
    return TreeNode(
        feature=int(obj["f"]),
        threshold=float(obj["t"]),
        left=_node_from_obj(obj["l"]),
        right=_node_from_obj(obj["r"]),
    )


_RESERVED_KEYS = {"format", "version", "classes", "params", "trees", "n_features"}


def save_model(path, forest: RandomForest, feature_names, meta: dict | None = None) -> None:
    if len(feature_names) != forest.n_features:
        raise ValueError(
            f"{len(feature_names)} feature names for {forest.n_features} model features"
        )
    blob = {
        "format": "faultlab-forest",
        "version": 1,
        "classes": forest.classes,
        "params": {
            "n_trees": forest.n_trees,
            "max_depth": forest.max_depth,
            "min_samples_leaf": forest.min_samples_leaf,
            "max_features": forest.max_features,
            "bootstrap": forest.bootstrap,
            "seed": forest.seed,
        },
        "n_features": forest.n_features,
        "trees": [
            {"root": _node_to_obj(t.root), "importance": t._importance.tolist()}
            for t in forest.trees
        ],
        "feature_names": list(feature_names),
        "schema_hash": schema_hash(feature_names),
    }
    for key, value in (meta or {}).items():
        if key in _RESERVED_KEYS:
            raise ValueError(f"meta key {key!r} is reserved")
        blob[key] = value
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        json.dump(blob, fh)
        fh.write("\n")


def load_model(path) -> tuple[RandomForest, dict]:
    with open(os.fspath(path), "r", encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format") != "faultlab-forest":
        raise ValueError(f"{path}: not a model file")
    names = blob["feature_names"]
    if schema_hash(names) != blob["schema_hash"]:
        raise ValueError(f"{path}: schema hash does not match the feature names")
    forest = RandomForest(**blob["params"])
    forest.classes = list(blob["classes"])
    forest.n_features = int(blob["n_features"])
    for entry in blob["trees"]:
        tree = DecisionTree(
            max_depth=forest.max_depth, min_samples_leaf=forest.min_samples_leaf
        )
        tree.classes = forest.classes
        tree.n_features = forest.n_features
        tree.root = _node_from_obj(entry["root"])
        tree._importance = np.asarray(entry["importance"], dtype=np.float64)
        forest.trees.append(tree)
    meta = {k: v for k, v in blob.items() if k not in _RESERVED_KEYS}
    return forest, meta
