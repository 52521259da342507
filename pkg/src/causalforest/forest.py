"""Honest regression and causal forests.

A forest is grown in little-bag groups of ``ci_group_size`` trees. The trees
of a group share one subsample; each tree splits that subsample at random into
a split half, used to choose the splits, and an estimate half, whose rows are
the only ones stored in the leaves.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _trees
from .errors import (
    FormatVersionMismatch,
    InsufficientData,
    InvalidParams,
    NoEligibleTrees,
    ZeroTreatmentVariation,
)

FORMAT_VERSION = 1
REGRESSION = "regression"
CAUSAL = "causal"


def default_mtry(p: int) -> int:
    return min(p, math.ceil(math.sqrt(p) + 20))


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 32-bit seed for a sub-stream identified by ``tags``."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 2000
    sample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    mtry: int | None = None
    min_node_size: int = 5
    ci_group_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if int(self.num_trees) != self.num_trees or self.num_trees < 1:
            raise InvalidParams("num_trees must be a positive integer")
        if self.ci_group_size < 1:
            raise InvalidParams("ci_group_size must be positive")
        if self.num_trees % self.ci_group_size:
            raise InvalidParams(
                f"num_trees={self.num_trees} is not a multiple of ci_group_size={self.ci_group_size}"
            )
        if not 0 < self.sample_fraction <= 1:
            raise InvalidParams("sample_fraction must lie in (0, 1]")
        if not 0 < self.honesty_fraction < 1:
            raise InvalidParams("honesty_fraction must lie in (0, 1)")
        if self.mtry is not None and self.mtry < 1:
            raise InvalidParams("mtry must be positive")
        if self.min_node_size < 1:
            raise InvalidParams("min_node_size must be positive")
        if self.seed < 0:
            raise InvalidParams("seed must be non-negative")

    def resolve(self, p: int) -> "ForestParams":
        mtry = default_mtry(p) if self.mtry is None else self.mtry
        if mtry > p:
            raise InvalidParams(f"mtry={mtry} exceeds the {p} available features")
        return replace(self, mtry=int(mtry))

    @property
    def n_groups(self) -> int:
        return self.num_trees // self.ci_group_size


@dataclass(eq=False)
class Forest:
    """Grown ensemble in flat-array form (see :mod:`causalforest._trees`)."""

    kind: str
    params: ForestParams
    n_train: int
    n_features: int
    subsample: np.ndarray
    split_rows: np.ndarray
    est_rows: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    est_start: np.ndarray
    est_end: np.ndarray
    depth: np.ndarray
    n_nodes: np.ndarray
    feature_names: tuple[str, ...] | None = None
    # training data; not persisted with the trees
    X: np.ndarray | None = None
    target: np.ndarray | None = None
    y_res: np.ndarray | None = None
    w_res: np.ndarray | None = None
    _member: np.ndarray | None = field(default=None, repr=False)
    _leaf: tuple | None = field(default=None, repr=False)
    _packed: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_trees(self) -> int:
        return self.feature.shape[0]

    @property
    def group_size(self) -> int:
        return self.params.ci_group_size

    @property
    def member(self) -> np.ndarray:
        """``member[g, i]`` is true when row ``i`` is in little bag ``g``'s subsample."""
        if self._member is None:
            self._member = _trees.membership(self.subsample, self.n_train)
        return self._member

    @property
    def nodes(self) -> np.ndarray:
        if self._packed is None:
            self._packed = _trees.pack_nodes(self.feature, self.threshold, self.left, self.right)
        return self._packed

    def tree_groups(self) -> np.ndarray:
        return np.arange(self.num_trees) // self.group_size

    def tree_subsample(self, b: int) -> np.ndarray:
        return self.subsample[b // self.group_size]

    def leaves(self, b: int) -> dict[int, np.ndarray]:
        out = {}
        for node in range(self.n_nodes[b]):
            if self.feature[b, node] < 0:
                out[node] = self.est_rows[b, self.est_start[b, node]:self.est_end[b, node]]
        return out

    def leaf_sums(self, a, c):
        return _trees.leaf_sums(self.feature, self.est_rows, self.est_start, self.est_end,
                                self.n_nodes, np.asarray(a, float), np.asarray(c, float))

    def select_trees(self, groups) -> "Forest":
        """Sub-forest made of whole little-bag groups (used for ensemble-size studies)."""
        groups = np.asarray(groups)
        trees = (groups[:, None] * self.group_size + np.arange(self.group_size)).ravel()
        return replace(
            self,
            params=replace(self.params, num_trees=len(trees)),
            subsample=self.subsample[groups], split_rows=self.split_rows[trees],
            est_rows=self.est_rows[trees], feature=self.feature[trees],
            threshold=self.threshold[trees], left=self.left[trees], right=self.right[trees],
            est_start=self.est_start[trees], est_end=self.est_end[trees],
            depth=self.depth[trees], n_nodes=self.n_nodes[trees], _member=None, _leaf=None, _packed=None,
        )

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        trees = []
        for b in range(self.num_trees):
            nodes = []
            for node in range(self.n_nodes[b]):
                f = int(self.feature[b, node])
                if f >= 0:
                    nodes.append({
                        "feature": f,
                        "threshold": float(self.threshold[b, node]),
                        "left": int(self.left[b, node]),
                        "right": int(self.right[b, node]),
                    })
                else:
                    rows = self.est_rows[b, self.est_start[b, node]:self.est_end[b, node]]
                    nodes.append({"samples": rows.tolist()})
            trees.append({
                "subsample": self.tree_subsample(b).tolist(),
                "estimate_half": np.sort(self.est_rows[b]).tolist(),
                "nodes": nodes,
            })
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "params": asdict(self.params),
            "n_train": self.n_train,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names) if self.feature_names else None,
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        if d.get("format_version") != FORMAT_VERSION:
            raise FormatVersionMismatch(
                f"forest format_version {d.get('format_version')!r}, expected {FORMAT_VERSION}"
            )
        params = ForestParams(**d["params"])
        trees = d["trees"]
        n_trees = len(trees)
        if n_trees != params.num_trees:
            raise FormatVersionMismatch("tree count does not match params.num_trees")
        gs = params.ci_group_size
        max_nodes = max(len(t["nodes"]) for t in trees)
        n_est = len(trees[0]["estimate_half"])
        sub_size = len(trees[0]["subsample"])
        feature = np.full((n_trees, max_nodes), -1, dtype=np.int64)
        threshold = np.zeros((n_trees, max_nodes))
        left = np.full((n_trees, max_nodes), -1, dtype=np.int64)
        right = np.full((n_trees, max_nodes), -1, dtype=np.int64)
        est_start = np.zeros((n_trees, max_nodes), dtype=np.int64)
        est_end = np.zeros((n_trees, max_nodes), dtype=np.int64)
        depth = np.zeros((n_trees, max_nodes), dtype=np.int64)
        est_rows = np.empty((n_trees, n_est), dtype=np.int64)
        split_rows = np.empty((n_trees, sub_size - n_est), dtype=np.int64)
        subsample = np.empty((n_trees // gs, sub_size), dtype=np.int64)
        n_nodes = np.zeros(n_trees, dtype=np.int64)
        for b, t in enumerate(trees):
            sub = np.asarray(t["subsample"], dtype=np.int64)
            subsample[b // gs] = sub
            est = np.asarray(t["estimate_half"], dtype=np.int64)
            split_rows[b] = np.setdiff1d(sub, est)
            pos = 0
            n_nodes[b] = len(t["nodes"])
            for node, nd in enumerate(t["nodes"]):
                if "samples" in nd:
                    rows = nd["samples"]
                    est_start[b, node] = pos
                    est_rows[b, pos:pos + len(rows)] = rows
                    pos += len(rows)
                    est_end[b, node] = pos
                else:
                    feature[b, node] = nd["feature"]
                    threshold[b, node] = nd["threshold"]
                    left[b, node] = nd["left"]
                    right[b, node] = nd["right"]
            for node in range(n_nodes[b]):
                if feature[b, node] >= 0:
                    depth[b, left[b, node]] = depth[b, node] + 1
                    depth[b, right[b, node]] = depth[b, node] + 1
        names = d.get("feature_names")
        return cls(
            kind=d["kind"], params=params, n_train=int(d["n_train"]),
            n_features=int(d["n_features"]), subsample=subsample, split_rows=split_rows,
            est_rows=est_rows, feature=feature, threshold=threshold, left=left, right=right,
            est_start=est_start, est_end=est_end, depth=depth, n_nodes=n_nodes,
            feature_names=tuple(names) if names else None,
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _grow(X, y, w, causal, params: ForestParams, kind_tag: int) -> Forest:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or y.shape != w.shape:
        raise InvalidParams("X, target and treatment lengths disagree")
    n, p = X.shape
    params = params.resolve(p)
    mns = params.min_node_size
    sub_size = int(math.floor(params.sample_fraction * n))
    n_split = int(math.floor(sub_size * params.honesty_fraction))
    n_est = sub_size - n_split
    if n < 2 * mns or n_split < mns or n_est < 1:
        raise InsufficientData(
            f"n={n} rows give split halves of {n_split} and estimate halves of {n_est}; "
            f"min_node_size={mns} needs at least {mns} and 1"
        )
    max_nodes = 2 * max(1, min(n_split // mns, n_est)) + 1
    seeds = np.array(
        [derive_seed(params.seed, kind_tag, g) for g in range(params.n_groups)], dtype=np.uint64
    )
    min_sign = max(2, mns // 2)
    out = _trees.grow_forest(X, y, w, causal, seeds, params.ci_group_size, sub_size, n_split,
                             params.mtry, mns, min_sign, max_nodes)
    (subsample, split_rows, est_rows, feature, threshold, left, right, est_start, est_end,
     depth, n_nodes) = out
    est_rows, est_start, est_end = _trees.canonical_layout(feature, est_rows, est_start,
                                                           est_end, n_nodes)
    width = int(n_nodes.max())
    return Forest(
        kind=CAUSAL if causal else REGRESSION, params=params, n_train=n, n_features=p,
        subsample=subsample, split_rows=split_rows, est_rows=est_rows,
        feature=feature[:, :width].copy(), threshold=threshold[:, :width].copy(),
        left=left[:, :width].copy(), right=right[:, :width].copy(),
        est_start=est_start[:, :width].copy(), est_end=est_end[:, :width].copy(),
        depth=depth[:, :width].copy(), n_nodes=n_nodes,
    )


def grow_regression_forest(X, target, params: ForestParams = ForestParams(), feature_names=None) -> Forest:
    """Honest regression forest: variance-reduction splits, estimate-half leaf means."""
    target = np.asarray(target, dtype=float)
    forest = _grow(X, target, np.zeros_like(target), False, params, 0)
    forest.X = np.ascontiguousarray(X, dtype=float)
    forest.target = target
    forest.feature_names = tuple(feature_names) if feature_names is not None else None
    return forest


def grow_causal_forest(X, y_res, w_res, params: ForestParams = ForestParams(), feature_names=None) -> Forest:
    """Honest causal forest on centred outcome and treatment residuals.

    Splits maximise ``sum_c n_c * tau_c**2`` over the two children, ``tau_c``
    being the split-half Robinson estimate of the child. Each child needs
    ``min_node_size`` split-half rows, ``max(2, min_node_size // 2)`` rows of
    each treatment sign and at least one estimate-half row.
    """
    w_res = np.asarray(w_res, dtype=float)
    if w_res.size == 0 or np.ptp(w_res) <= 1e-12 * max(1.0, float(np.max(np.abs(w_res)))):
        raise ZeroTreatmentVariation("treatment residuals are numerically constant")
    forest = _grow(X, y_res, w_res, True, params, 1)
    forest.X = np.ascontiguousarray(X, dtype=float)
    forest.y_res = np.asarray(y_res, dtype=float)
    forest.w_res = w_res
    forest.feature_names = tuple(feature_names) if feature_names is not None else None
    return forest


def kernel_weights(forest: Forest, x, exclude_for: int | None = None) -> np.ndarray:
    """Adaptive-kernel weights of every training row at ``x``.

    The weight of row i averages, over trees, ``1/|leaf|`` when i is an
    estimate-half row of the leaf containing ``x``. With ``exclude_for`` only
    trees whose subsample misses that row take part.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (forest.n_features,):
        raise InvalidParams(f"x must have {forest.n_features} entries")
    excl = -1 if exclude_for is None else int(exclude_for)
    alpha, used = _trees.kernel_weights(
        x, excl, forest.n_train, forest.nodes, forest.est_rows, forest.est_start, forest.est_end, forest.member, forest.group_size,
    )
    if used == 0:
        raise NoEligibleTrees(f"row {excl} is in the subsample of every tree", rows=[excl])
    return alpha


def _regression_leaves(forest: Forest):
    if forest.kind != REGRESSION or forest.target is None:
        raise InvalidParams("a regression forest with its training target is required")
    if forest._leaf is None:
        forest._leaf = forest.leaf_sums(forest.target, np.ones_like(forest.target))
    return forest._leaf


def predict_oob(forest: Forest, X=None, on_missing: str = "raise") -> np.ndarray:
    """Out-of-bag predictions of a regression forest for its own training rows.

    Row ``i`` averages the leaf means of the trees whose subsample misses it.
    Rows without such a tree raise :class:`NoEligibleTrees` listing them, or are
    returned as NaN with ``on_missing="nan"``.
    """
    s, cnt = _regression_leaves(forest)
    X = forest.X if X is None else X
    if X is None:
        raise InvalidParams("the training covariates are required")
    X = np.ascontiguousarray(X, dtype=float)
    if X.shape[0] != forest.n_train:
        raise InvalidParams("out-of-bag prediction needs the training rows in order")
    excl = np.arange(X.shape[0])
    pred, used = _trees.regression_predict(X, excl, forest.nodes, s, cnt, forest.member,
                                           forest.group_size)
    missing = np.flatnonzero(used == 0)
    if missing.size and on_missing == "raise":
        raise NoEligibleTrees(f"{missing.size} rows appear in every tree's subsample", rows=missing)
    return pred


def predict(forest: Forest, X) -> np.ndarray:
    """Predictions of a regression forest for new rows (all trees)."""
    s, cnt = _regression_leaves(forest)
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    excl = np.full(X.shape[0], -1, dtype=np.int64)
    pred, _ = _trees.regression_predict(X, excl, forest.nodes, s, cnt, forest.member,
                                        forest.group_size)
    return pred


def excess_error(forest: Forest, x, y_res=None, w_res=None) -> float:
    """Monte Carlo variance of the CATE at ``x`` due to the finite ensemble.

    Estimated as the spread of the little-bag group estimates divided by the
    number of groups. Residuals default to those the forest was grown on.
    """
    from .cate import _causal_query

    y_res = forest.y_res if y_res is None else y_res
    w_res = forest.w_res if w_res is None else w_res
    res = _causal_query(forest, y_res, w_res, np.atleast_2d(np.asarray(x, float)), None)
    return float(max(res["excess"][0], 0.0))


# -- tuning ------------------------------------------------------------------

DEFAULT_SEARCH_SPACE = {
    "min_node_size": "log2",  # floor(2 ** (u * (log2(n) - 4)))
    "sample_fraction": (0.05, 0.5),
    "mtry": "scaled",  # ceil(default_mtry(p) * u)
    "honesty_fraction": (0.5, 0.8),
}


def _draw_candidate(rng, space, n, p, base: ForestParams) -> ForestParams:
    vals = {}
    for name in ("min_node_size", "sample_fraction", "mtry", "honesty_fraction"):
        rule = space.get(name)
        if rule is None:
            continue
        u = rng.uniform()
        if name == "min_node_size":
            if rule == "log2":
                vals[name] = max(1, int(math.floor(2 ** (u * max(0.0, math.log2(n) - 4)))))
            else:
                lo, hi = rule
                vals[name] = int(lo + math.floor(u * (hi - lo + 1)))
        elif name == "mtry":
            if rule == "scaled":
                vals[name] = max(1, int(math.ceil(default_mtry(p) * u)))
            else:
                lo, hi = rule
                vals[name] = min(p, int(lo + math.floor(u * (hi - lo + 1))))
        else:
            lo, hi = rule
            vals[name] = lo + u * (hi - lo)
    return replace(base, **vals)


def oob_rloss(forest: Forest, X, y_res, w_res) -> float:
    from .cate import _causal_query

    res = _causal_query(forest, y_res, w_res, np.ascontiguousarray(X, float), np.arange(len(y_res)))
    tau = res["point"]
    if not np.all(np.isfinite(tau)):
        return math.inf
    return float(np.sum((np.asarray(y_res) - tau * np.asarray(w_res)) ** 2))


def tune_params(X, y_res, w_res, search_space=None, budget: int = 50, seed: int = 0,
                base: ForestParams = ForestParams()) -> ForestParams:
    """Random search scored by out-of-bag R-loss of small causal forests.

    Each candidate is fitted with ``max(200, num_trees / 10)`` trees (rounded up
    to a multiple of the group size). Ties favour the larger ``min_node_size``.
    """
    if budget < 1:
        raise InvalidParams("budget must be at least 1")
    X = np.ascontiguousarray(X, dtype=float)
    n, p = X.shape
    space = DEFAULT_SEARCH_SPACE if search_space is None else search_space
    gs = base.ci_group_size
    small = max(200, base.num_trees // 10)
    small = int(math.ceil(small / gs) * gs)
    rng = np.random.default_rng(seed)
    # one shared stream, so identical candidates get identical scores
    trial_seed = derive_seed(seed, 7)
    scored = []
    for k in range(budget):
        cand = _draw_candidate(rng, space, n, p, base)
        trial = replace(cand, num_trees=small, seed=trial_seed)
        try:
            forest = grow_causal_forest(X, y_res, w_res, trial)
            score = oob_rloss(forest, X, y_res, w_res)
        except (InsufficientData, InvalidParams):
            score = math.inf
        scored.append((score, -cand.min_node_size, k, cand))
    best = min(scored, key=lambda t: t[:3])
    if not math.isfinite(best[0]):
        raise InsufficientData("no tuning candidate could be fitted")
    return best[3]
