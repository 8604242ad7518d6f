import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tlf import gbt
from tlf.domain import ConfigError
from tlf.gbt import GbtEnsemble, GbtHyperparams, ModelError
from oracles import ensemble_predict


def test_single_stump_exact():
    X = np.array([[0.0], [1.0], [2.0], [3.0]] * 3)
    y = np.array([0.0, 0.0, 10.0, 10.0] * 3)
    ens = gbt.fit(X, y, GbtHyperparams(n_trees=1, max_depth=1, learning_rate=1.0))
    t = ens.trees[0]
    assert t.feature.tolist() == [0, -1, -1]
    assert t.threshold[0] == 1.5
    assert t.value[1:].tolist() == [-5.0, 5.0]
    assert gbt.predict(ens, X).tolist() == y.tolist()


def test_ties_go_to_lowest_feature():
    x = np.arange(20.0)
    X = np.column_stack([x, x, x])
    ens = gbt.fit(X, (x > 9).astype(float), GbtHyperparams(n_trees=1, max_depth=1, learning_rate=1.0))
    assert ens.trees[0].feature[0] == 0


def test_linear_fixture_and_monotone_training():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (500, 3))
    y = 3 * X[:, 0]
    ens = gbt.fit(X, y, GbtHyperparams(n_trees=200, max_depth=3))
    assert gbt.rmse(y, gbt.predict(ens, X)) < 0.1
    assert np.all(np.diff(ens.train_rmse) <= 1e-12)


def test_serialized_model_matches_tree_walk(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(1000, 5))
    X[:, 3] = rng.integers(0, 3, 1000)
    y = X[:, 0] * 4 + np.where(X[:, 3] == 1, 10, 0) + rng.normal(0, 0.5, 1000)
    ens = gbt.fit(X, y, GbtHyperparams(n_trees=30, max_depth=4, subsample=0.7, seed=3))
    path = ens.save(tmp_path / "m.json")
    data = json.loads(path.read_text())
    assert ensemble_predict(data, X.tolist()) == gbt.predict(GbtEnsemble.load(path), X).tolist()


def test_min_samples_leaf():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 2))
    y = rng.normal(size=200)
    ens = gbt.fit(X, y, GbtHyperparams(n_trees=5, max_depth=6, min_samples_leaf=15))
    for t in ens.trees:
        leaves = [_leaf_of(t, row) for row in X]
        _, counts = np.unique(leaves, return_counts=True)
        assert counts.min() >= 15


def _leaf_of(tree, row):
    node = 0
    while tree.feature[node] != -1:
        node = tree.left[node] if row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return node


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=10, max_size=40, unique=True),
       st.integers(1, 5))
def test_leaves_hold_residual_means(values, depth):
    X = np.array(values)[:, None]
    y = np.sin(np.array(values))
    ens = gbt.fit(X, y, GbtHyperparams(n_trees=1, max_depth=depth, learning_rate=1.0))
    if not ens.trees:
        return
    tree = ens.trees[0]
    leaves = np.array([_leaf_of(tree, row) for row in X])
    resid = y - ens.base_score
    for leaf in np.unique(leaves):
        assert tree.value[leaf] == pytest.approx(resid[leaves == leaf].mean(), abs=1e-12)
    deeper = gbt.fit(X, y, GbtHyperparams(n_trees=1, max_depth=depth + 1, learning_rate=1.0))
    assert deeper.train_rmse[-1] <= ens.train_rmse[-1] + 1e-12


def test_constant_target_and_validation():
    X = np.arange(20.0)[:, None]
    ens = gbt.fit(X, np.full(20, 4.0))
    assert ens.trees == [] and gbt.predict(ens, X).tolist() == [4.0] * 20
    bad = X.copy()
    bad[3, 0] = np.nan
    with pytest.raises(ModelError, match="'load'"):
        gbt.fit(bad, np.zeros(20), columns=["load"])
    with pytest.raises(ModelError, match="10 training rows"):
        gbt.fit(X[:5], np.zeros(5))
    with pytest.raises(ConfigError):
        GbtHyperparams(learning_rate=0)


def test_schema_fingerprint_checked(tmp_path):
    X = np.random.default_rng(0).normal(size=(30, 2))
    ens = gbt.fit(X, X[:, 0], GbtHyperparams(n_trees=3), columns=["a", "b"])
    with pytest.raises(ModelError, match="fingerprint"):
        gbt.predict(ens, X, columns=["b", "a"])
    with pytest.raises(ModelError, match="expected 2"):
        gbt.predict(ens, X[:, :1])
    d = ens.to_dict()
    d["columns"] = ["a", "c"]
    with pytest.raises(ModelError):
        GbtEnsemble.from_dict(d)
    d = ens.to_dict()
    del d["version"]
    with pytest.raises(ModelError):
        GbtEnsemble.from_dict(d)


@given(st.integers(2, 40), st.integers(2, 10), st.integers(0, 9))
def test_fold_sizes(n, k, seed):
    if n < k:
        with pytest.raises(ConfigError):
            gbt.fold_assignment(n, k, seed)
        return
    counts = np.bincount(gbt.fold_assignment(n, k, seed), minlength=k)
    assert counts.max() - counts.min() <= 1 and counts.sum() == n


def test_fold_needs_two():
    with pytest.raises(ConfigError):
        gbt.fold_assignment(10, 1, 0)


def test_grid_search_tie_breaks():
    X = np.random.default_rng(0).normal(size=(40, 2))
    best, table = gbt.grid_search(X, np.ones(40), {"n_trees": [50, 10], "max_depth": [4, 2]}, k=3)
    assert (best.n_trees, best.max_depth) == (10, 2)
    assert len(table) == 4


def test_permutation_importance_ranks_signal():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 3))
    y = 5 * X[:, 1] + rng.normal(0, 0.1, 400)
    ens = gbt.fit(X, y, GbtHyperparams(n_trees=50, max_depth=3), columns=["a", "b", "c"])
    imp = gbt.permutation_importance(ens, X, y, seed=0, n_repeats=3)
    assert imp["feature"].iloc[0] == "b"
    assert imp.set_index("feature").loc["a", "importance"] < 0.2


def test_schema_groups():
    assert gbt.schema_groups(["x", "rd=1", "rd=2", "hour"]) == {"x": [0], "rd": [1, 2], "hour": [3]}


def test_predict_levels_clamps():
    X = np.arange(12.0)[:, None]
    ens = gbt.fit(X, np.r_[np.full(6, -3.0), np.full(6, 80.0)], GbtHyperparams(n_trees=1, learning_rate=1.0))
    assert gbt.predict_levels(ens, X).tolist() == [0] * 6 + [4] * 6
