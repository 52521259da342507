"""Plot-ready tables for communicating CATE estimates.

Every function returns plain data (mostly :class:`pandas.DataFrame`);
:func:`write_report` stores a table as ``report_<method>.csv`` with a JSON
sidecar describing how it was made.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from . import _trees
from .errors import InvalidParams, NotHeldOut
from .forest import Forest
from .inference import RATE_GRID, DrScores, _grid_index

# ---------------------------------------------------------------------------
# importance and feature selection


@dataclass(frozen=True)
class ImportanceVector:
    weights: np.ndarray
    names: tuple[str, ...]
    uniform_fallback: bool = False

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"feature": list(self.names), "importance": self.weights})


def split_weight_totals(forest: Forest, decay: float = 0.5, max_depth: int = 4) -> np.ndarray:
    """Unnormalized per-feature sums of ``decay**depth`` over splits above ``max_depth``."""
    if not 0 < decay <= 1 or max_depth < 1:
        raise InvalidParams("need 0 < decay <= 1 and max_depth >= 1")
    totals = np.zeros(forest.n_features)
    mask = (forest.feature >= 0) & (forest.depth < max_depth)
    np.add.at(totals, forest.feature[mask], decay ** forest.depth[mask].astype(float))
    return totals


def variable_importance(forest: Forest, decay: float = 0.5, max_depth: int = 4) -> ImportanceVector:
    """Depth-weighted split counts, normalized to sum to one.

    A split at depth ``d`` (the root has depth 0) weighs ``decay**d`` when
    ``d < max_depth`` and nothing otherwise. A forest without counted splits
    gets uniform weights and ``uniform_fallback=True``.
    """
    totals = split_weight_totals(forest, decay, max_depth)
    p = forest.n_features
    names = forest.feature_names or tuple(f"x{j + 1}" for j in range(p))
    s = totals.sum()
    if s <= 0:
        return ImportanceVector(np.full(p, 1.0 / p), tuple(names), True)
    return ImportanceVector(totals / s, tuple(names))


def basu_select(importance) -> tuple[np.ndarray, bool]:
    """Indices with above-average importance, and whether the argmax fallback fired."""
    w = np.asarray(getattr(importance, "weights", importance), float)
    sel = np.flatnonzero(w > w.mean())
    if sel.size == 0:
        return np.array([int(np.argmax(w))]), True
    return sel, False


# ---------------------------------------------------------------------------
# distributions of CATEs


def cate_histogram(taus, bins: int = 20) -> pd.DataFrame:
    """Equal-width bins over ``[min, max]``; counts sum to n."""
    taus = np.asarray(taus, float)
    counts, edges = np.histogram(taus, bins=bins)
    return pd.DataFrame({"left": edges[:-1], "right": edges[1:], "count": counts})


def ranked_cate_table(taus, ses, alpha: float = 0.05, row_ids=None) -> pd.DataFrame:
    """Rows sorted by increasing CATE with two-sided normal intervals."""
    taus = np.asarray(taus, float)
    ses = np.asarray(ses, float)
    if not 0 < alpha < 1:
        raise InvalidParams("alpha must lie in (0, 1)")
    order = np.argsort(taus, kind="mergesort")
    z = stats.norm.ppf(1 - alpha / 2)
    ids = np.arange(len(taus)) if row_ids is None else np.asarray(row_ids)
    return pd.DataFrame({
        "rank": np.arange(1, len(taus) + 1),
        "row_id": ids[order],
        "tau_hat": taus[order],
        "se": ses[order],
        "lower": taus[order] - z * ses[order],
        "upper": taus[order] + z * ses[order],
    })


# ---------------------------------------------------------------------------
# held-out quantile analysis


@dataclass(frozen=True)
class QuantileBinReport:
    thresholds: np.ndarray
    assignment: np.ndarray
    table: pd.DataFrame
    top_vs_rest: float
    top_vs_rest_se: float
    wald_z: float

    @property
    def top_minus_bottom(self) -> float:
        est = self.table["estimate"].to_numpy()
        return float(est[-1] - est[0])

    def to_dict(self):
        return {"thresholds": self.thresholds.tolist(), "top_vs_rest": self.top_vs_rest,
                "top_vs_rest_se": self.top_vs_rest_se, "wald_z": self.wald_z,
                "top_minus_bottom": self.top_minus_bottom}


def _mean_se(g):
    if g.size == 0:
        return np.nan, np.nan
    if g.size == 1:
        return float(g[0]), np.nan
    return float(g.mean()), float(g.std(ddof=1) / np.sqrt(g.size))


def _require_disjoint(train_ids, scores: DrScores):
    overlap = np.intersect1d(np.asarray(train_ids, np.int64), scores.row_ids)
    if overlap.size:
        raise NotHeldOut(f"{overlap.size} evaluation rows were used for training")


def quantile_bins(train_taus, holdout_scores: DrScores, holdout_taus, k: int = 4, *,
                  train_ids, check_held_out: bool = True) -> QuantileBinReport:
    """Effects by CATE quantile, estimated on held-out rows.

    Thresholds are the ``k``-quantiles of the training CATEs; each held-out
    row falls in a bin by its own CATE, ties at a threshold going to the lower
    bin. Bin effects are mean scores with ``sd / sqrt(n)`` errors. The Wald
    statistic compares the top bin with the pooled remaining rows.
    ``check_held_out=False`` skips the disjointness check, which is only
    useful to show how reusing training rows inflates the spread.
    """
    if k < 2:
        raise InvalidParams("k must be at least 2")
    if check_held_out:
        _require_disjoint(train_ids, holdout_scores)
    train_taus = np.asarray(train_taus, float)
    ht = np.asarray(holdout_taus, float)
    g = holdout_scores.gamma
    if ht.shape != g.shape:
        raise InvalidParams("one holdout CATE per score is required")
    thresholds = np.quantile(train_taus, np.arange(1, k) / k)
    assign = np.searchsorted(thresholds, ht, side="left")
    rows = []
    for b in range(k):
        gb = g[assign == b]
        est, se = _mean_se(gb)
        rows.append({"bin": b + 1, "n": int(gb.size), "estimate": est, "se": se,
                     "empty": gb.size == 0})
    table = pd.DataFrame(rows)
    top, rest = g[assign == k - 1], g[assign < k - 1]
    m_top, s_top = _mean_se(top)
    m_rest, s_rest = _mean_se(rest)
    diff = m_top - m_rest
    dse = float(np.sqrt(s_top ** 2 + s_rest ** 2))
    return QuantileBinReport(thresholds, assign, table, float(diff), dse, float(diff / dse))


def covariate_profile_by_quantile(X, assignment, names=None) -> pd.DataFrame:
    """Mean of each covariate within each bin; bins with fewer than 2 rows are flagged."""
    X = np.atleast_2d(np.asarray(X, float))
    assignment = np.asarray(assignment)
    names = names or [f"x{j + 1}" for j in range(X.shape[1])]
    df = pd.DataFrame(X, columns=list(names))
    df["bin"] = assignment
    out = df.groupby("bin", sort=True).mean()
    out.insert(0, "n", df.groupby("bin", sort=True).size())
    out["small_bin"] = out["n"] < 2
    return out.reset_index()


# ---------------------------------------------------------------------------
# effect curves


def cate_by_variable(taus, x_col, mode: str = "binned", k: int = 10, bandwidth: float | None = None,
                     n_points: int = 50) -> tuple[pd.DataFrame, bool]:
    """CATE as a function of one covariate.

    ``binned`` uses ``k`` equal-count bins of ``x_col`` and reports the mean
    and sd of the CATEs in each; bins collapse when ``x_col`` has too few
    distinct values, signalled by the returned flag. ``smoothed`` fits a
    tricube-weighted local-linear curve at ``n_points`` evenly spaced points,
    with bandwidth 0.3 of the range of ``x_col`` by default.
    """
    taus = np.asarray(taus, float)
    x = np.asarray(x_col, float)
    if taus.shape != x.shape:
        raise InvalidParams("taus and x_col lengths differ")
    if mode == "binned":
        return _binned_curve(taus, x, k)
    if mode == "smoothed":
        return _smoothed_curve(taus, x, bandwidth, n_points), False
    raise InvalidParams("mode must be 'binned' or 'smoothed'")


def _binned_curve(taus, x, k):
    if k < 1:
        raise InvalidParams("k must be positive")
    edges = np.unique(np.quantile(x, np.linspace(0, 1, k + 1)))
    if edges.size == 1:
        assign = np.zeros(x.size, dtype=int)
    else:
        assign = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, edges.size - 2)
    labels = np.unique(assign)
    merged = labels.size < k
    rows = []
    for b in labels:
        m = assign == b
        rows.append({"bin": int(b) + 1, "x_lo": float(x[m].min()), "x_hi": float(x[m].max()),
                     "x_mean": float(x[m].mean()), "n": int(m.sum()),
                     "tau_mean": float(taus[m].mean()),
                     "tau_sd": float(taus[m].std(ddof=1)) if m.sum() > 1 else np.nan})
    return pd.DataFrame(rows), merged


def _smoothed_curve(taus, x, bandwidth, n_points):
    lo, hi = float(x.min()), float(x.max())
    h = 0.3 * (hi - lo) if bandwidth is None else float(bandwidth)
    grid = np.linspace(lo, hi, n_points)
    fit = np.full(n_points, np.nan)
    if h <= 0:
        fit[:] = taus.mean()
        return pd.DataFrame({"x": grid, "tau_smooth": fit})
    for j, x0 in enumerate(grid):
        u = np.abs(x - x0) / h
        w = np.where(u < 1, (1 - u ** 3) ** 3, 0.0)
        if np.count_nonzero(w) < 2:
            continue
        d = x - x0
        s0, s1, s2 = w.sum(), (w * d).sum(), (w * d * d).sum()
        t0, t1 = (w * taus).sum(), (w * d * taus).sum()
        det = s0 * s2 - s1 * s1
        fit[j] = t0 / s0 if det <= 1e-14 * s0 * s2 else (s2 * t0 - s1 * t1) / det
    return pd.DataFrame({"x": grid, "tau_smooth": fit})


def group_cates(scores: DrScores, groups) -> pd.DataFrame:
    """Mean score and ``sd / sqrt(n)`` per group label; singletons get no se."""
    groups = np.asarray(groups)
    if groups.shape != scores.gamma.shape:
        raise InvalidParams("one group label per score is required")
    rows = []
    for lab in pd.unique(groups):
        g = scores.gamma[groups == lab]
        est, se = _mean_se(g)
        rows.append({"group": lab, "n": int(g.size), "estimate": est, "se": se,
                     "se_undefined": g.size < 2})
    return pd.DataFrame(rows).sort_values("group", kind="mergesort").reset_index(drop=True)


# ---------------------------------------------------------------------------
# single tree and policies


def tree_rlosses(forest: Forest, centered, X=None) -> np.ndarray:
    """Out-of-bag R-loss of every tree with its leaf Robinson estimates."""
    X = forest.X if X is None else np.ascontiguousarray(X, float)
    if X is None:
        raise InvalidParams("training covariates are required")
    y_res = np.asarray(centered.y_res, float)
    w_res = np.asarray(centered.w_res, float)
    yw, _ = forest.leaf_sums(y_res, w_res)
    ww, _ = forest.leaf_sums(w_res, w_res)
    return _trees.tree_rloss(X, y_res, w_res, forest.nodes, yw, ww, forest.member, forest.group_size)


def best_tree(forest: Forest, centered, X=None) -> int:
    """Index of the tree with the smallest out-of-bag R-loss (lowest index on ties)."""
    return int(np.argmin(tree_rlosses(forest, centered, X)))


def tree_table(forest: Forest, b: int) -> pd.DataFrame:
    """Nodes of tree ``b`` as a table (leaves have feature -1)."""
    m = forest.n_nodes[b]
    names = forest.feature_names
    feat = forest.feature[b, :m]
    return pd.DataFrame({
        "node": np.arange(m),
        "depth": forest.depth[b, :m],
        "feature": feat,
        "feature_name": [names[f] if names and f >= 0 else "" for f in feat],
        "threshold": np.where(feat >= 0, forest.threshold[b, :m], np.nan),
        "left": forest.left[b, :m],
        "right": forest.right[b, :m],
        "n_estimate": forest.est_end[b, :m] - forest.est_start[b, :m],
    })


def derive_policy(taus, threshold: float = 0.0) -> np.ndarray:
    """Treat exactly when the CATE is at least ``threshold``."""
    return (np.asarray(taus, float) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class PolicyValue:
    value: float
    se: float
    baseline: str
    qini: pd.DataFrame | None = None

    def to_dict(self):
        return {"value": self.value, "se": self.se, "baseline": self.baseline}


def policy_value(policy, scores: DrScores, baseline: str = "treat_none", *, train_ids,
                 priority=None) -> PolicyValue:
    """Held-out value of ``policy`` relative to treating nobody or everybody.

    The value is ``mean(pi * G) - mean(b)`` with ``b = 0`` for ``treat_none``
    and ``b = G`` for ``treat_all``; its se is the sd of the per-row
    contributions over ``sqrt(n)``. Given ``priority`` (held-out CATEs), the
    Qini table lists the mean score of the top ``q`` share and the gain
    ``q * mean_top`` of treating only that share.
    """
    _require_disjoint(train_ids, scores)
    pi = np.asarray(policy, float)
    g = scores.gamma
    if pi.shape != g.shape or not np.all((pi == 0) | (pi == 1)):
        raise InvalidParams("policy must be a 0/1 vector with one entry per score")
    if baseline == "treat_none":
        contrib = pi * g
    elif baseline == "treat_all":
        contrib = pi * g - g
    else:
        raise InvalidParams("baseline must be treat_none or treat_all")
    n = len(g)
    se = float(contrib.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    qini = None
    if priority is not None:
        pr = np.asarray(priority, float)
        order = np.argsort(-pr, kind="mergesort")
        cum = np.cumsum(g[order])
        k = _grid_index(n) + 1
        mean_top = cum[k - 1] / k
        qini = pd.DataFrame({"p": RATE_GRID, "mean_top": mean_top, "gain": mean_top * k / n})
    return PolicyValue(float(contrib.mean()), se, baseline, qini)


# ---------------------------------------------------------------------------
# output


def write_report(out_dir, method: str, table: pd.DataFrame, params: dict | None = None,
                 provenance: dict | None = None) -> tuple[Path, Path]:
    """Write ``report_<method>.csv`` and its JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv = out_dir / f"report_{method}.csv"
    side = out_dir / f"report_{method}.json"
    table.to_csv(csv, index=False, float_format="%.17g")
    side.write_text(json.dumps({"method": method, "params": params or {},
                                "provenance": provenance or {}}, indent=2, sort_keys=True,
                               default=_jsonable))
    return csv, side


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)
