"""Pointwise CATE estimates from the forest kernel.

The estimate at ``x`` is the kernel-weighted Robinson ratio

    tau(x) = sum_i a_i(x) y_res_i w_res_i / sum_i a_i(x) w_res_i**2

and its variance comes from the spread of the little-bag groups, debiased
for within-group Monte Carlo noise with a flat-prior correction that keeps it
positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import _trees
from .errors import DegenerateKernel, InvalidParams, NoEligibleTrees, TooFewGroups
from .forest import CAUSAL, Forest

MIN_DENOMINATOR = 1e-10
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class CateEstimate:
    point: float
    se: float = float("nan")
    excess_error: float = float("nan")


@dataclass
class CateBatch:
    """Estimates for many rows; failed rows are NaN and listed in ``failures``."""

    tau: np.ndarray
    se: np.ndarray
    excess_error: np.ndarray
    failures: dict[int, str]
    row_ids: np.ndarray | None = None

    def to_frame(self) -> pd.DataFrame:
        ids = np.arange(len(self.tau)) if self.row_ids is None else self.row_ids
        return pd.DataFrame({"row_id": ids, "tau_hat": self.tau, "se": self.se,
                             "excess_error": self.excess_error})


def _residuals(centered):
    return np.asarray(centered.y_res, float), np.asarray(centered.w_res, float)


def _causal_query(forest: Forest, y_res, w_res, Xq, exclude) -> dict:
    if forest.kind != CAUSAL:
        raise InvalidParams("a causal forest is required")
    y_res = np.asarray(y_res, float)
    w_res = np.asarray(w_res, float)
    if y_res.shape != (forest.n_train,) or w_res.shape != (forest.n_train,):
        raise InvalidParams("residuals must align with the forest's training rows")
    Xq = np.ascontiguousarray(Xq, dtype=float)
    if Xq.ndim != 2 or Xq.shape[1] != forest.n_features:
        raise InvalidParams(f"queries need {forest.n_features} covariates")
    yw, cnt = forest.leaf_sums(y_res, w_res)
    ww, _ = forest.leaf_sums(w_res, w_res)
    excl = np.full(Xq.shape[0], -1, dtype=np.int64) if exclude is None else np.asarray(exclude, np.int64)
    point, var, excess, used, status = _trees.causal_predict(
        Xq, excl, forest.nodes, yw, ww, cnt, forest.member, forest.group_size, MIN_DENOMINATOR, VAR_FLOOR,
    )
    return {"point": point, "var": var, "excess": excess, "used": used, "status": status}


def _raise_for(status: int, where: str):
    if status == _trees.STATUS_NO_TREES:
        raise NoEligibleTrees(f"no tree is eligible at {where}")
    if status == _trees.STATUS_DEGENERATE:
        raise DegenerateKernel(f"kernel-weighted treatment variation below {MIN_DENOMINATOR} at {where}")


def estimate_cate(forest: Forest, centered, x, exclude_for: int | None = None) -> CateEstimate:
    """CATE at one covariate vector.

    ``excess_error`` needs at least two contributing little bags and ``se``
    additionally needs groups of two or more trees; both are NaN otherwise.
    """
    y_res, w_res = _residuals(centered)
    excl = None if exclude_for is None else [exclude_for]
    res = _causal_query(forest, y_res, w_res, np.atleast_2d(np.asarray(x, float)), excl)
    st = int(res["status"][0])
    _raise_for(st, "x" if exclude_for is None else f"row {exclude_for}")
    if st == _trees.STATUS_FEW_GROUPS:
        return CateEstimate(point=float(res["point"][0]), excess_error=float(res["excess"][0]))
    return CateEstimate(point=float(res["point"][0]), se=float(np.sqrt(res["var"][0])),
                        excess_error=float(res["excess"][0]))


def cate_se_little_bags(forest: Forest, centered, x, exclude_for: int | None = None) -> float:
    if forest.group_size < 2:
        raise TooFewGroups("the forest was grown with ci_group_size < 2")
    y_res, w_res = _residuals(centered)
    excl = None if exclude_for is None else [exclude_for]
    res = _causal_query(forest, y_res, w_res, np.atleast_2d(np.asarray(x, float)), excl)
    st = int(res["status"][0])
    _raise_for(st, "x")
    if st == _trees.STATUS_FEW_GROUPS:
        raise TooFewGroups("fewer than two little bags contribute")
    return float(np.sqrt(res["var"][0]))


def _batch(res, row_ids=None) -> CateBatch:
    failures = {}
    names = {
        _trees.STATUS_NO_TREES: "NoEligibleTrees",
        _trees.STATUS_DEGENERATE: "DegenerateKernel",
    }
    for i in np.flatnonzero(np.isin(res["status"], list(names))):
        failures[int(i)] = names[int(res["status"][i])]
    return CateBatch(tau=res["point"], se=np.sqrt(res["var"]), excess_error=res["excess"],
                     failures=failures, row_ids=row_ids)


def oob_cates(forest: Forest, centered, X=None) -> CateBatch:
    """Out-of-bag CATE for every training row (row i skips trees that saw it)."""
    X = forest.X if X is None else X
    if X is None:
        raise InvalidParams("training covariates are required")
    y_res, w_res = _residuals(centered)
    res = _causal_query(forest, y_res, w_res, X, np.arange(forest.n_train))
    return _batch(res, getattr(centered, "row_ids", None))


def predict_cates(forest: Forest, centered, Xq, row_ids=None) -> CateBatch:
    """CATE at new covariate rows using every tree."""
    y_res, w_res = _residuals(centered)
    res = _causal_query(forest, y_res, w_res, np.atleast_2d(Xq), None)
    return _batch(res, row_ids)
