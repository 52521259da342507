import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalforest import ForestParams, fit
from causalforest.centering import ORACLE, CenteredData
from causalforest.errors import InvalidParams, NotHeldOut
from causalforest.forest import Forest
from causalforest.inference import DrScores, ate_aipw
from causalforest.presentation import (
    basu_select,
    best_tree,
    cate_by_variable,
    cate_histogram,
    covariate_profile_by_quantile,
    derive_policy,
    group_cates,
    policy_value,
    quantile_bins,
    ranked_cate_table,
    tree_rlosses,
    tree_table,
    variable_importance,
    write_report,
)
from causalforest.simulate import DgpSpec, generate


def _leaf(rows):
    return {"samples": rows}


def _split(f, t, left, right):
    return {"feature": f, "threshold": t, "left": left, "right": right}


def _forest(trees, n=8, p=3):
    trees = [{"subsample": list(range(n)), "estimate_half": sorted(sum(
        (nd["samples"] for nd in nodes if "samples" in nd), [])), "nodes": nodes} for nodes in trees]
    return Forest.from_dict({
        "format_version": 1, "kind": "causal",
        "params": {**ForestParams(num_trees=len(trees), ci_group_size=1).__dict__, "mtry": 1},
        "n_train": n, "n_features": p, "feature_names": [f"v{j + 1}" for j in range(p)], "trees": trees,
    })


# root on v1, both children split on v2
HAND = [_split(0, 0.5, 1, 2), _split(1, 0.5, 3, 4), _split(1, 0.5, 5, 6),
        _leaf([0]), _leaf([1]), _leaf([2]), _leaf([3])]


def _scores(g, ids=None):
    g = np.asarray(g, float)
    return DrScores(g, np.arange(len(g)) if ids is None else np.asarray(ids))


# -- importance ----------------------------------------------------------------------


def test_importance_hand_example():
    imp = variable_importance(_forest([HAND]))
    np.testing.assert_array_equal(imp.weights, [0.5, 0.5, 0.0])
    assert not imp.uniform_fallback


def test_importance_single_feature():
    tree = [_split(2, 0.3, 1, 2), _leaf([0, 1]), _split(2, 0.7, 3, 4), _leaf([2]), _leaf([3])]
    np.testing.assert_array_equal(variable_importance(_forest([tree])).weights, [0, 0, 1])


def test_importance_no_splits_uniform():
    imp = variable_importance(_forest([[_leaf([0, 1])], [_leaf([2, 3])]]))
    np.testing.assert_array_equal(imp.weights, np.full(3, 1 / 3))
    assert imp.uniform_fallback


def test_importance_depth_cutoff():
    # chain of splits on v1 down to depth 4; the depth-4 split does not count
    flat = [None] * 11
    for d in range(5):
        flat[2 * d] = _split(0 if d < 4 else 1, 0.5, 2 * d + 1, 2 * d + 2)
        flat[2 * d + 1] = _leaf([d])
    flat[10] = _leaf([5])
    imp = variable_importance(_forest([flat]))
    np.testing.assert_array_equal(imp.weights, [1.0, 0.0, 0.0])


@pytest.fixture(scope="module")
def fitted():
    data, tau, _ = generate(DgpSpec("two_group", n=400, p=4, seed=3))
    return fit(data, ForestParams(num_trees=100, seed=1), use_oracle=True)


def test_importance_sums_to_one_and_order_invariant(fitted):
    f = fitted.forest
    imp = variable_importance(f)
    assert abs(imp.weights.sum() - 1) < 1e-12 and len(imp.weights) == f.n_features
    perm = np.random.default_rng(0).permutation(f.num_trees)
    d = f.to_dict()
    d["trees"] = [d["trees"][b] for b in perm]
    d["params"] = {**d["params"], "ci_group_size": 1}
    np.testing.assert_allclose(variable_importance(Forest.from_dict(d)).weights, imp.weights, rtol=0, atol=1e-15)


@pytest.mark.parametrize("w, expect, flag", [
    ([0.4, 0.3, 0.2, 0.1], [0, 1], False),
    ([0.25, 0.25, 0.25, 0.25], [0], True),
    ([0.97, 0.01, 0.01, 0.01], [0], False),
])
def test_basu_examples(w, expect, flag):
    sel, fb = basu_select(np.array(w))
    assert sel.tolist() == expect and fb == flag


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_basu_scale_invariant(w, c):
    w = np.array(w)
    a, fa = basu_select(w)
    b, fb = basu_select(w * c)
    # only sign comparisons against the mean matter; rounding can move exact ties
    if not np.any(np.isclose(w, w.mean(), rtol=1e-9, atol=0)):
        assert a.tolist() == b.tolist() and fa == fb


# -- distributions -------------------------------------------------------------------


def test_histogram_constant():
    h = cate_histogram(np.full(30, 1.5), bins=5)
    assert (h["count"] > 0).sum() == 1 and h["count"].sum() == 30


def test_histogram_matches_independent_binning():
    t = np.random.default_rng(0).normal(size=500)
    h = cate_histogram(t, bins=7)
    lo, hi = t.min(), t.max()
    idx = np.minimum(((t - lo) / (hi - lo) * 7).astype(int), 6)
    np.testing.assert_array_equal(h["count"], np.bincount(idx, minlength=7))


def test_ranked_table():
    tab = ranked_cate_table([0.1, 0.5, 0.9], [1.0, 2.0, 0.5])
    assert tab["row_id"].tolist() == [0, 1, 2]
    np.testing.assert_allclose(tab["upper"] - tab["lower"], 2 * 1.959964 * tab["se"], rtol=1e-6)
    t = np.random.default_rng(1).normal(size=50)
    tab = ranked_cate_table(t, np.ones(50))
    assert sorted(tab["row_id"]) == list(range(50)) and tab["tau_hat"].is_monotonic_increasing


# -- quantile bins -------------------------------------------------------------------


def test_quantile_bins_partition_and_thresholds():
    rng = np.random.default_rng(2)
    train = rng.normal(size=301)
    ht = rng.normal(size=200)
    g = rng.normal(size=200)
    rep = quantile_bins(train, _scores(g, np.arange(1000, 1200)), ht, k=4, train_ids=np.arange(301))
    assert rep.table["n"].sum() == 200
    assert np.all(np.diff(rep.thresholds) >= 0)
    np.testing.assert_array_equal(rep.thresholds, np.quantile(train, [0.25, 0.5, 0.75]))
    for b in range(4):
        m = rep.assignment == b
        assert rep.table["estimate"][b] == pytest.approx(g[m].mean(), abs=1e-14)
    top, rest = g[rep.assignment == 3], g[rep.assignment < 3]
    assert rep.top_vs_rest == pytest.approx(top.mean() - rest.mean(), abs=1e-14)


def test_quantile_bins_not_held_out():
    with pytest.raises(NotHeldOut):
        quantile_bins(np.arange(4.0), _scores(np.ones(3)), np.arange(3.0), k=2, train_ids=[0, 1])


def test_quantile_bins_empty_bin_reported():
    rep = quantile_bins(np.arange(10.0), _scores(np.ones(4), np.arange(10, 14)), np.full(4, 100.0),
                        k=2, train_ids=np.arange(10))
    assert rep.table["empty"].tolist() == [True, False]
    assert np.isnan(rep.table["estimate"][0])


def test_covariate_profile():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(60, 2))
    X[:, 1] = 4.0
    a = rng.integers(0, 3, 60)
    prof = covariate_profile_by_quantile(X, a)
    direct = pd.DataFrame(X, columns=["x1", "x2"]).groupby(a).mean()
    np.testing.assert_allclose(prof["x1"], direct["x1"], rtol=1e-14)
    assert (prof["x2"] == 4.0).all()
    one = covariate_profile_by_quantile(X, np.zeros(60))
    np.testing.assert_allclose(one[["x1", "x2"]].to_numpy()[0], X.mean(axis=0), rtol=1e-14)


# -- curves --------------------------------------------------------------------------


def test_smoother_identity():
    x = np.random.default_rng(4).uniform(size=1000)
    curve, _ = cate_by_variable(x, x, mode="smoothed")
    interior = (curve["x"] > 0.1) & (curve["x"] < 0.9)
    assert len(curve) == 50
    assert np.max(np.abs(curve["tau_smooth"][interior] - curve["x"][interior])) < 0.05


def test_smoother_flat_on_constant():
    x = np.random.default_rng(5).uniform(size=200)
    curve, _ = cate_by_variable(np.full(200, 0.3), x, mode="smoothed")
    np.testing.assert_allclose(curve["tau_smooth"], 0.3, atol=1e-12)


def test_binned_merge_flag():
    x = np.repeat([0.0, 1.0], 50)
    tab, merged = cate_by_variable(np.arange(100.0), x, mode="binned", k=10)
    assert merged and len(tab) == 2 and tab["n"].sum() == 100
    tab, merged = cate_by_variable(np.arange(100.0), np.arange(100.0), k=4)
    assert not merged and tab["n"].tolist() == [25, 25, 25, 25]


def test_bad_mode():
    with pytest.raises(InvalidParams):
        cate_by_variable([1.0], [1.0], mode="spline")


def test_group_cates():
    g = np.array([1.0, 3.0, 2.0, 5.0])
    one = group_cates(_scores(g), np.zeros(4))
    assert one["estimate"][0] == ate_aipw(_scores(g)).point
    assert one["se"][0] == pytest.approx(ate_aipw(_scores(g)).se, rel=1e-14)
    two = group_cates(_scores(g), ["a", "a", "a", "b"])
    assert two["se_undefined"].tolist() == [False, True] and np.isnan(two["se"][1])


# -- trees ---------------------------------------------------------------------------


def test_best_tree_single(fitted):
    f = fitted.forest.select_trees([0])
    assert best_tree(f, fitted.centered) == 0


def test_best_tree_duplicate_lowest():
    tree = [_split(0, 0.5, 1, 2), _leaf([0, 1]), _leaf([2, 3])]
    f = _forest([tree, tree], n=8, p=1)
    f = Forest.from_dict({**f.to_dict(), "trees": [
        {**t, "subsample": [0, 1, 2, 3]} for t in f.to_dict()["trees"]]})
    X = np.array([[0.1], [0.2], [0.8], [0.9], [0.3], [0.7], [0.1], [0.95]])
    Y = np.array([1.0, 0.0, 2.0, -1.0, 0.5, 3.0, -0.2, 1.0])
    W = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    c = CenteredData(np.zeros(8), np.full(8, 0.5), Y, W - 0.5, ORACLE, Y, W)
    losses = tree_rlosses(f, c, X)
    assert losses[0] == losses[1] and best_tree(f, c, X) == 0


def test_rloss_matches_direct(fitted):
    f, c = fitted.forest.select_trees([0, 1]), fitted.centered
    X = fitted.data.X
    direct = []
    for b in range(f.num_trees):
        sub = set(f.tree_subsample(b).tolist())
        leaves = f.leaves(b)
        tau = {k: np.sum(c.y_res[r] * c.w_res[r]) / np.sum(c.w_res[r] ** 2) for k, r in leaves.items()}
        tab = tree_table(f, b)
        loss = 0.0
        for i in range(len(X)):
            if i in sub:
                continue
            k = 0
            while tab["feature"][k] >= 0:
                k = tab["left"][k] if X[i, tab["feature"][k]] <= tab["threshold"][k] else tab["right"][k]
            loss += (c.y_res[i] - tau[k] * c.w_res[i]) ** 2
        direct.append(loss)
    np.testing.assert_allclose(tree_rlosses(f, c), direct, rtol=1e-10)


def test_tree_table_shape(fitted):
    tab = tree_table(fitted.forest, 0)
    leaves = tab["feature"] < 0
    assert tab.loc[leaves, "n_estimate"].sum() == len(fitted.forest.est_rows[0])


# -- policy --------------------------------------------------------------------------


def test_derive_policy_examples():
    assert derive_policy([-1, 2, 0], 0).tolist() == [0, 1, 1]
    assert derive_policy([-1, 2, 0], -np.inf).tolist() == [1, 1, 1]
    assert derive_policy([-1, 2, 0], 3).tolist() == [0, 0, 0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.floats(-5, 5), st.floats(0, 3))
def test_derive_policy_monotone(t, a, d):
    lo, hi = derive_policy(t, a), derive_policy(t, a + d)
    assert np.all(hi <= lo)


def test_policy_value_trivial():
    g = np.random.default_rng(6).normal(1, 1, 100)
    s = _scores(g, np.arange(100, 200))
    assert policy_value(np.zeros(100), s, train_ids=np.arange(100)).value == 0.0
    v = policy_value(np.ones(100), s, train_ids=np.arange(100))
    assert v.value == ate_aipw(s).point
    assert policy_value(np.ones(100), s, "treat_all", train_ids=[]).value == 0.0
    with pytest.raises(NotHeldOut):
        policy_value(np.ones(100), s, train_ids=[150])


def test_policy_qini_table():
    g = np.array([1.0, 2.0, 3.0, 4.0])
    v = policy_value(np.ones(4), _scores(g), train_ids=[], priority=[4.0, 3.0, 2.0, 1.0])
    assert v.qini["mean_top"].iloc[-1] == 2.5 and v.qini["mean_top"].iloc[0] == 1.0


# -- output --------------------------------------------------------------------------


def test_write_report(tmp_path):
    csv, side = write_report(tmp_path, "histogram", cate_histogram([1.0, 2.0]), {"bins": np.int64(3)})
    assert csv.name == "report_histogram.csv"
    assert json.loads(side.read_text())["params"] == {"bins": 3}
