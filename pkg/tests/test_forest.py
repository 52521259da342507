import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalforest.cate import oob_cates
from causalforest.errors import (
    FormatVersionMismatch,
    InsufficientData,
    InvalidParams,
    NoEligibleTrees,
    ZeroTreatmentVariation,
)
from causalforest.forest import (
    Forest,
    ForestParams,
    default_mtry,
    excess_error,
    grow_causal_forest,
    grow_regression_forest,
    kernel_weights,
    predict,
    predict_oob,
    tune_params,
)


def _xyw(n=300, p=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    w = np.where(rng.uniform(size=n) < 0.5, 0.5, -0.5)
    y = (1 + (X[:, 0] > 0.5)) * w + rng.normal(size=n)
    return X, y, w


# -- parameters ---------------------------------------------------------------


def test_defaults():
    p = ForestParams()
    assert (p.num_trees, p.sample_fraction, p.honesty_fraction, p.min_node_size, p.ci_group_size) == (
        2000, 0.5, 0.5, 5, 2)
    assert [default_mtry(q) for q in (1, 10, 100, 1000)] == [1, 10, 30, 52]
    assert p.resolve(10).mtry == 10


@pytest.mark.parametrize("kw", [
    {"num_trees": 3}, {"num_trees": 0}, {"sample_fraction": 0}, {"sample_fraction": 1.5},
    {"honesty_fraction": 1.0}, {"mtry": 0}, {"min_node_size": 0}, {"ci_group_size": 0}, {"seed": -1},
])
def test_invalid_params(kw):
    with pytest.raises(InvalidParams):
        ForestParams(**kw)


def test_mtry_above_p():
    with pytest.raises(InvalidParams):
        ForestParams(mtry=4).resolve(3)


def test_insufficient_data():
    X, y, w = _xyw(n=12)
    with pytest.raises(InsufficientData):
        grow_regression_forest(X, y, ForestParams(num_trees=2, min_node_size=5))


def test_zero_treatment_variation():
    X, y, _ = _xyw()
    with pytest.raises(ZeroTreatmentVariation):
        grow_causal_forest(X, y, np.zeros(len(y)), ForestParams(num_trees=2))


# -- structure ------------------------------------------------------------------


@pytest.fixture(scope="module")
def forest():
    X, y, w = _xyw(400, 4, 1)
    return grow_causal_forest(X, y, w, ForestParams(num_trees=40, seed=3))


def test_tree_invariants(forest):
    n = forest.n_train
    sub_size = int(0.5 * n)
    for b in range(forest.num_trees):
        sub = forest.tree_subsample(b)
        split, est = set(forest.split_rows[b]), set(forest.est_rows[b])
        assert not split & est
        assert split | est == set(sub)
        assert len(sub) == sub_size and len(split) == sub_size // 2
        leaves = forest.leaves(b)
        assert all(len(v) > 0 for v in leaves.values())
        assert sorted(np.concatenate(list(leaves.values()))) == sorted(est)
        X = forest.X
        rows_at = {0: np.array(sorted(split))}
        for node in range(forest.n_nodes[b]):
            f = forest.feature[b, node]
            if f < 0:
                continue
            t = forest.threshold[b, node]
            rows = rows_at[node]
            go = X[rows, f] <= t
            rows_at[forest.left[b, node]] = rows[go]
            rows_at[forest.right[b, node]] = rows[~go]
            vals = np.sort(X[rows, f])
            k = np.searchsorted(vals, t, side="right")
            lo, hi = vals[k - 1], vals[k]
            assert t == 0.5 * (lo + hi) or t == lo


def test_group_members_share_subsample(forest):
    gs = forest.group_size
    for g in range(forest.num_trees // gs):
        trees = range(g * gs, (g + 1) * gs)
        subs = {tuple(sorted(np.concatenate([forest.split_rows[b], forest.est_rows[b]]))) for b in trees}
        assert len(subs) == 1


def test_determinism():
    X, y, w = _xyw(200, 3, 5)
    a = grow_causal_forest(X, y, w, ForestParams(num_trees=20, seed=11))
    b = grow_causal_forest(X, y, w, ForestParams(num_trees=20, seed=11))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    c = grow_causal_forest(X, y, w, ForestParams(num_trees=20, seed=12))
    assert json.dumps(a.to_dict()) != json.dumps(c.to_dict())


def test_persistence_round_trip(forest, tmp_path):
    path = tmp_path / "f.json"
    forest.save(path)
    back = Forest.load(path)
    for name in ("subsample", "split_rows", "est_rows", "feature", "threshold", "left", "right",
                 "est_start", "est_end", "depth", "n_nodes"):
        np.testing.assert_array_equal(getattr(back, name), getattr(forest, name), err_msg=name)
    assert back.params == forest.params
    d = json.loads(path.read_text())
    assert set(d) >= {"format_version", "kind", "params", "trees"}
    assert set(d["trees"][0]) == {"subsample", "estimate_half", "nodes"}


def test_format_version_mismatch(forest):
    d = forest.to_dict()
    d["format_version"] = 99
    with pytest.raises(FormatVersionMismatch):
        Forest.from_dict(d)


# -- kernel -------------------------------------------------------------------------


def _hand_forest(trees, n=10, group_size=1):
    """Forest from hand-written trees; a set stands for a single-leaf tree."""
    trees = [{"subsample": list(range(n)), "estimate_half": sorted(t), "nodes": [{"samples": sorted(t)}]}
             if isinstance(t, set) else t for t in trees]
    return Forest.from_dict({
        "format_version": 1, "kind": "causal",
        "params": {**ForestParams(num_trees=len(trees), ci_group_size=group_size).__dict__, "mtry": 1},
        "n_train": n, "n_features": 1, "feature_names": ["x"], "trees": trees,
    })


def test_kernel_single_leaf():
    f = _hand_forest([{3, 8}])
    a = kernel_weights(f, np.array([0.3]))
    assert a[3] == a[8] == 0.5 and a.sum() == 1.0


def test_kernel_two_trees():
    split = {"subsample": list(range(10)), "estimate_half": [3, 8], "nodes": [
        {"feature": 0, "threshold": 0.5, "left": 1, "right": 2}, {"samples": [8]}, {"samples": [3]}]}
    f = _hand_forest([{3, 8}, split])
    a = kernel_weights(f, np.array([0.3]))
    assert a[8] == 0.75 and a[3] == 0.25


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_kernel_normalized_and_nonnegative(forest, x):
    a = kernel_weights(forest, np.array(x))
    assert abs(a.sum() - 1) < 1e-12
    assert (a >= 0).all()
    assert set(np.flatnonzero(a)) <= set(np.unique(forest.est_rows))


def test_kernel_exclusion(forest):
    i = 17
    a = kernel_weights(forest, forest.X[i], exclude_for=i)
    assert a[i] == 0 and abs(a.sum() - 1) < 1e-12


def test_no_eligible_trees():
    X, y, w = _xyw(100, 2, 0)
    f = grow_causal_forest(X, y, w, ForestParams(num_trees=2, sample_fraction=1.0, min_node_size=2))
    with pytest.raises(NoEligibleTrees):
        kernel_weights(f, X[0], exclude_for=0)


# -- regression forest ---------------------------------------------------------------


def test_constant_target():
    X, _, _ = _xyw(100, 2, 0)
    f = grow_regression_forest(X, np.full(100, 3.25), ForestParams(num_trees=50))
    np.testing.assert_array_equal(predict_oob(f), 3.25)


def test_binary_feature_group_means():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, 200).astype(float)
    y = 10 * x + rng.normal(size=200)
    f = grow_regression_forest(x[:, None], y, ForestParams(num_trees=200))
    pred = predict_oob(f)
    for g in (0, 1):
        assert np.all(np.abs(pred[x == g] - y[x == g].mean()) < 0.5)


def test_oob_eligible_share():
    X, y, _ = _xyw(200, 2, 0)
    f = grow_regression_forest(X, y, ForestParams(num_trees=1000))
    share = (~f.member).mean(axis=0)
    assert abs(share.mean() - 0.5) < 0.01


def test_oob_against_crossfit():
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(50, 2))
    y = 3 * X[:, 0] + rng.normal(scale=0.3, size=50)
    f = grow_regression_forest(X, y, ForestParams(num_trees=1000, min_node_size=2))
    mse_oob = np.mean((predict_oob(f) - y) ** 2)
    folds = np.arange(50) % 5
    cf = np.empty(50)
    for k in range(5):
        tr = folds != k
        g = grow_regression_forest(X[tr], y[tr], ForestParams(num_trees=1000, min_node_size=2))
        cf[~tr] = predict(g, X[~tr])
    mse_cf = np.mean((cf - y) ** 2)
    assert mse_oob <= 2 * mse_cf


def test_missing_oob_rows_reported():
    X, y, _ = _xyw(60, 2, 0)
    f = grow_regression_forest(X, y, ForestParams(num_trees=2, sample_fraction=1.0, min_node_size=2))
    with pytest.raises(NoEligibleTrees) as exc:
        predict_oob(f)
    assert len(exc.value.rows) == 60
    assert np.isnan(predict_oob(f, on_missing="nan")).all()


# -- causal forest ------------------------------------------------------------------


def test_constant_effect_near_root_estimate():
    rng = np.random.default_rng(2)
    n = 600
    X = rng.uniform(size=(n, 3))
    w = np.where(rng.uniform(size=n) < 0.5, 0.5, -0.5)
    y = 1.5 * w + rng.normal(scale=0.5, size=n)
    f = grow_causal_forest(X, y, w, ForestParams(num_trees=200, seed=1))

    class C:
        y_res, w_res = y, w
    b = oob_cates(f, C)
    root = np.sum(y * w) / np.sum(w * w)
    assert np.all(np.abs(b.tau - root) < 3 * b.se + 0.1)


def test_binary_moderator_groups():
    rng = np.random.default_rng(3)
    n = 2000
    x = rng.integers(0, 2, n).astype(float)
    X = np.column_stack([x, rng.uniform(size=n)])
    w = np.where(rng.uniform(size=n) < 0.5, 0.5, -0.5)
    y = 2 * x * w + rng.normal(size=n)
    f = grow_causal_forest(X, y, w, ForestParams(num_trees=500, seed=2))

    class C:
        y_res, w_res = y, w
    tau = oob_cates(f, C).tau
    assert abs(tau[x == 1].mean() - tau[x == 0].mean() - 2) < 0.3


def test_excess_error_nonnegative_and_shrinks():
    X, y, w = _xyw(400, 3, 7)
    small = grow_causal_forest(X, y, w, ForestParams(num_trees=200, seed=5))
    large = grow_causal_forest(X, y, w, ForestParams(num_trees=2000, seed=5))
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(20, 3))
    e_small = np.array([excess_error(small, x) for x in pts])
    e_large = np.array([excess_error(large, x) for x in pts])
    assert (e_small >= 0).all() and (e_large >= 0).all()
    ratio = e_small.mean() / e_large.mean()
    assert 10 / 3 < ratio < 30


def test_identical_trees_no_excess_error():
    f = _hand_forest([{0, 1, 2, 3}, {0, 1, 2, 3}])
    y = np.array([1.0, 2.0, -1.0, 0.5] + [0.0] * 6)
    w = np.array([0.5, -0.5, 0.5, -0.5] + [0.5] * 6)
    assert excess_error(f, np.array([0.2]), y, w) == 0.0


# -- tuning ----------------------------------------------------------------------------


def test_tune_budget_one_returns_candidate():
    X, y, w = _xyw(200, 3, 0)
    base = ForestParams(num_trees=200)
    got = tune_params(X, y, w, budget=1, seed=4, base=base)
    from causalforest.forest import DEFAULT_SEARCH_SPACE, _draw_candidate
    expected = _draw_candidate(np.random.default_rng(4), DEFAULT_SEARCH_SPACE, 200, 3, base)
    assert got == expected


def test_tune_duplicate_candidates_deterministic():
    X, y, w = _xyw(200, 3, 0)
    space = {"min_node_size": (5, 5)}
    a = tune_params(X, y, w, space, budget=4, seed=1, base=ForestParams(num_trees=200))
    b = tune_params(X, y, w, space, budget=4, seed=1, base=ForestParams(num_trees=200))
    assert a == b == ForestParams(num_trees=200)


def test_tune_rejects_zero_budget():
    X, y, w = _xyw(50, 2, 0)
    with pytest.raises(InvalidParams):
        tune_params(X, y, w, budget=0)
