"""Classifier and evaluation tests.

Everything numeric is compared against hand-worked values or a naive
recount, not against the implementation under test.
"""

import numpy as np
import pytest

from faultlab.features import FeatureSet
from faultlab.ml import (
    CVResult,
    DecisionTree,
    RandomForest,
    cross_validate,
    gini_impurity,
    load_model,
    pool_core_windows,
    save_model,
    schema_hash,
    score_classification,
)


def blobs(n_per_class=60, centers=((0, 0), (8, 8), (-8, 8)), seed=0, spread=1.0):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for i, (cx, cy) in enumerate(centers):
        X.append(rng.normal((cx, cy), spread, size=(n_per_class, 2)))
        y += [f"class{i}"] * n_per_class
    X = np.vstack(X)
    perm = rng.permutation(len(y))
    return X[perm], [y[i] for i in perm]


# --- gini and single splits -----------------------------------------------


def test_gini_impurity_hand_values():
    assert gini_impurity(np.array([2, 2])) == pytest.approx(0.5)
    assert gini_impurity(np.array([4, 0])) == 0.0
    assert gini_impurity(np.array([1, 1, 1])) == pytest.approx(2.0 / 3.0)
    assert gini_impurity(np.array([0, 0])) == 0.0  # empty node


def test_stump_finds_margin_midpoint():
    X = np.array([[1.0], [2.0], [3.0], [10.0], [11.0], [12.0]])
    y = ["a", "a", "a", "b", "b", "b"]
    tree = DecisionTree(max_depth=1)
    tree.fit(X, y)
    root = tree.root
    assert root.feature == 0
    assert root.threshold == pytest.approx(6.5)  # midpoint of 3 and 10
    assert tree.predict(np.array([[6.4], [6.6]])).tolist() == ["a", "b"]


def test_first_feature_wins_ties():
    # identical information in both columns: the first one is chosen
    col = np.array([0.0, 1.0, 2.0, 3.0])
    X = np.column_stack([col, col])
    y = ["a", "a", "b", "b"]
    tree = DecisionTree(max_depth=1)
    tree.fit(X, y)
    assert tree.root.feature == 0


def test_split_is_left_inclusive():
    X = np.array([[0.0], [1.0]])
    tree = DecisionTree(max_depth=1)
    tree.fit(X, ["lo", "hi"])
    # x <= threshold goes left
    assert tree.predict(np.array([[tree.root.threshold]])).tolist() == ["lo"]


def test_min_samples_leaf_respected():
    rng = np.random.default_rng(5)
    X = rng.uniform(size=(40, 3))
    y = ["a" if v < 0.5 else "b" for v in X[:, 0]]
    tree = DecisionTree(max_depth=10, min_samples_leaf=7)
    tree.fit(X, y)

    def leaf_sizes(node, idx):
        if node.feature < 0:
            return [len(idx)]
        mask = X[idx, node.feature] <= node.threshold
        return leaf_sizes(node.left, idx[mask]) + leaf_sizes(node.right, idx[~mask])

    sizes = leaf_sizes(tree.root, np.arange(len(y)))
    assert sum(sizes) == 40
    assert min(sizes) >= 7


def test_depth_zero_is_majority_leaf_with_lexicographic_ties():
    X = np.zeros((4, 2))
    tree = DecisionTree(max_depth=0)
    tree.fit(X, ["b", "b", "a", "a"])  # tie: the lexicographically first wins
    assert tree.predict(np.zeros((1, 2))).tolist() == ["a"]
    tree.fit(X, ["b", "b", "b", "a"])
    assert tree.predict(np.zeros((1, 2))).tolist() == ["b"]


def test_tree_memorizes_distinct_rows():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(120, 4))
    y = [f"c{i % 5}" for i in range(120)]
    tree = DecisionTree(max_depth=20)
    tree.fit(X, y)
    assert tree.predict(X).tolist() == y


# --- forest ------------------------------------------------------------------


def test_forest_degenerates_to_tree():
    X, y = blobs(seed=3)
    lone = RandomForest(n_trees=1, bootstrap=False, max_features=None, seed=0)
    lone.fit(X, y)
    tree = DecisionTree(max_depth=20)
    tree.fit(X, y)
    probe = np.random.default_rng(1).normal(0, 6, size=(100, 2))
    assert lone.predict(probe).tolist() == tree.predict(probe).tolist()


def test_forest_vote_recount():
    X, y = blobs(seed=4, spread=3.0)
    forest = RandomForest(n_trees=15, seed=9)
    forest.fit(X, y)
    probe = np.random.default_rng(2).normal(3, 5, size=(60, 2))
    got = forest.predict(probe)
    votes = np.array([t.predict_idx(probe) for t in forest.trees])  # (trees, rows)
    for j in range(60):
        counts = np.bincount(votes[:, j], minlength=len(forest.classes))
        best = counts.max()
        # ties go to the smallest class index
        want = forest.classes[int(np.flatnonzero(counts == best)[0])]
        assert got[j] == want


def test_forest_deterministic_under_seed():
    X, y = blobs(seed=6, spread=2.5)
    probe = np.random.default_rng(3).normal(0, 6, size=(40, 2))
    a = RandomForest(n_trees=10, seed=42)
    a.fit(X, y)
    b = RandomForest(n_trees=10, seed=42)
    b.fit(X, y)
    assert a.predict(probe).tolist() == b.predict(probe).tolist()
    np.testing.assert_allclose(a.feature_importances(), b.feature_importances())


def test_forest_separable_blobs_held_out():
    X, y = blobs(n_per_class=80, seed=7)
    train = slice(0, 180)
    test = slice(180, 240)
    forest = RandomForest(n_trees=20, seed=1)
    forest.fit(X[train], y[train])
    pred = forest.predict(X[test])
    assert (pred == np.array(y[test], dtype=object)).mean() == 1.0


def test_feature_importance_finds_planted_signal():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(300, 6))
    y = ["hot" if v > 0 else "cold" for v in X[:, 3]]
    forest = RandomForest(n_trees=15, seed=2)
    forest.fit(X, y)
    imp = forest.feature_importances()
    assert imp.shape == (6,)
    assert imp.sum() == pytest.approx(1.0)
    assert int(np.argmax(imp)) == 3
    assert imp[3] > 0.5


# --- scoring -----------------------------------------------------------------


def test_score_classification_hand_case():
    y_true = ["a", "a", "b", "b", "c"]
    y_pred = ["a", "b", "b", "b", "c"]
    s = score_classification(y_true, y_pred)
    assert s.per_class["a"].precision == pytest.approx(1.0)
    assert s.per_class["a"].recall == pytest.approx(0.5)
    assert s.per_class["a"].f1 == pytest.approx(2 / 3)
    assert s.per_class["b"].precision == pytest.approx(2 / 3)
    assert s.per_class["b"].recall == pytest.approx(1.0)
    assert s.per_class["b"].f1 == pytest.approx(0.8)
    assert s.per_class["c"].f1 == pytest.approx(1.0)
    assert s.macro_f == pytest.approx((2 / 3 + 0.8 + 1.0) / 3)
    assert s.weighted_f == pytest.approx((2 * (2 / 3) + 2 * 0.8 + 1 * 1.0) / 5)
    assert s.accuracy == pytest.approx(0.8)
    assert s.per_class["a"].support == 2


def test_score_macro_ignores_classes_absent_from_truth():
    # 'ghost' is predicted but never true: it may not dilute the macro F
    y_true = ["a", "a", "b"]
    y_pred = ["a", "ghost", "b"]
    s = score_classification(y_true, y_pred)
    assert set(s.per_class) == {"a", "b"}
    assert s.macro_f == pytest.approx((2 / 3 + 1.0) / 2)
    assert "ghost" in s.classes  # still visible in the confusion matrix
    i_a, i_ghost = s.classes.index("a"), s.classes.index("ghost")
    assert s.confusion[i_a, i_ghost] == 1


def test_confusion_matrix_hand_case():
    y_true = ["a", "a", "b", "b", "c"]
    y_pred = ["a", "b", "b", "b", "c"]
    s = score_classification(y_true, y_pred)
    assert s.classes == ["a", "b", "c"]
    want = np.array([[1, 1, 0], [0, 2, 0], [0, 0, 1]])
    np.testing.assert_array_equal(s.confusion, want)


def test_score_perfect_prediction():
    y = ["x", "y", "x"]
    s = score_classification(y, list(y))
    assert s.macro_f == 1.0 and s.accuracy == 1.0


# --- cross validation -----------------------------------------------------------


def test_cross_validate_time_order_contiguous_folds():
    X, y = blobs(n_per_class=50, seed=10)
    ends = np.arange(1000, 1000 + len(y) * 10, 10)
    res = cross_validate(X, y, window_ends=ends, n_folds=5, order="time", seed=0)
    assert isinstance(res, CVResult)
    assert len(res.folds) == 5
    assert sum(f.test_size for f in res.folds) == len(y)
    seen = []
    for f in res.folds:
        idx = np.sort(f.test_indices)
        assert idx.tolist() == list(range(idx[0], idx[-1] + 1))  # contiguous
        seen += idx.tolist()
    assert sorted(seen) == list(range(len(y)))
    assert res.macro_f == pytest.approx(np.mean([f.scores.macro_f for f in res.folds]))


def test_cross_validate_shuffled_differs_and_covers_all(seed=0):
    X, y = blobs(n_per_class=40, seed=12)
    ends = np.arange(len(y))
    res = cross_validate(X, y, window_ends=ends, n_folds=5, order="shuffled", seed=3)
    all_idx = sorted(i for f in res.folds for i in f.test_indices.tolist())
    assert all_idx == list(range(len(y)))
    contiguous = all(
        np.all(np.diff(np.sort(f.test_indices)) == 1) for f in res.folds
    )
    assert not contiguous  # astronomically unlikely under a real shuffle
    # deterministic under the seed
    res2 = cross_validate(X, y, window_ends=ends, n_folds=5, order="shuffled", seed=3)
    assert res2.macro_f == pytest.approx(res.macro_f)


def test_cross_validate_time_needs_no_ends():
    X, y = blobs(n_per_class=30, seed=13)
    res = cross_validate(X, y, n_folds=3, order="time")
    assert len(res.folds) == 3


# --- dataset assembly ----------------------------------------------------------


def core_set(view, ends, label, x_value):
    n = len(ends)
    return FeatureSet(
        view=view,
        feature_names=["m_avg", "m_std"],
        X=np.full((n, 2), x_value, dtype=float),
        window_ends=np.asarray(ends, dtype=np.int64),
        labels_mode=[label] * n,
        labels_recent=[label.upper()] * n,
        ambiguous=np.zeros(n, dtype=bool),
        window=60,
        step=10,
    )


def test_pool_core_windows_one_row_per_end():
    ends = list(range(100, 600, 10))
    sets = {
        "node": core_set("node", ends, "nope", 99.0),
        "core0": core_set("core0", ends, "zero", 0.0),
        "core1": core_set("core1", ends, "one", 1.0),
    }
    X, y, out_ends = pool_core_windows(sets, seed=0)
    assert X.shape == (len(ends), 2)
    assert out_ends.tolist() == ends
    # the sampled rows come from the per-core sets, never the node view
    assert set(np.unique(X)) <= {0.0, 1.0}
    assert set(y) == {"zero", "one"}  # with 50 draws both cores appear
    for row, label in zip(X, y):
        assert row[0] == (0.0 if label == "zero" else 1.0)
    # deterministic
    X2, y2, _ = pool_core_windows(sets, seed=0)
    assert y2 == y and np.array_equal(X2, X)
    X3, y3, _ = pool_core_windows(sets, seed=1)
    assert y3 != y  # a different draw somewhere


def test_pool_core_windows_recent_labels_and_ambiguous_drop():
    ends = list(range(100, 200, 10))
    s0 = core_set("core0", ends, "zero", 0.0)
    s0.ambiguous[:3] = True
    sets = {"core0": s0}
    X, y, out_ends = pool_core_windows(sets, seed=0, label="recent")
    assert set(y) == {"ZERO"}
    X2, y2, out2 = pool_core_windows(sets, seed=0, drop_ambiguous=True)
    assert len(y2) == len(ends) - 3
    assert out2.tolist() == ends[3:]


# --- persistence -----------------------------------------------------------------


def test_model_save_load_round_trip(tmp_path):
    X, y = blobs(seed=20, spread=2.0)
    forest = RandomForest(n_trees=8, seed=5)
    forest.fit(X, y)
    names = ["f0", "f1"]
    path = tmp_path / "model.json"
    save_model(path, forest, feature_names=names, meta={"view": "core"})
    loaded, meta = load_model(path)
    assert meta["feature_names"] == names
    assert meta["view"] == "core"
    assert meta["schema_hash"] == schema_hash(names)
    probe = np.random.default_rng(4).normal(0, 6, size=(50, 2))
    assert loaded.predict(probe).tolist() == forest.predict(probe).tolist()
    np.testing.assert_allclose(loaded.feature_importances(), forest.feature_importances())


def test_load_model_rejects_tampered_schema(tmp_path):
    import json

    X, y = blobs(seed=21)
    forest = RandomForest(n_trees=2, seed=0)
    forest.fit(X, y)
    path = tmp_path / "model.json"
    save_model(path, forest, feature_names=["f0", "f1"])
    blob = json.loads(path.read_text())
    blob["feature_names"] = ["f0", "hacked"]
    path.write_text(json.dumps(blob))
    with pytest.raises(ValueError, match="schema"):
        load_model(path)
