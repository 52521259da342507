"""Center, grow, predict out-of-bag and score in one call."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cate import CateBatch, oob_cates
from .centering import DEFAULT_CLAMP, CenteredData, local_center
from .data import Dataset
from .errors import NoEligibleTrees
from .forest import Forest, ForestParams, grow_causal_forest
from .inference import DrScores, dr_scores


@dataclass(frozen=True, eq=False)
class FitResult:
    data: Dataset
    centered: CenteredData
    forest: Forest
    oob: CateBatch
    scores: DrScores


def fit(data: Dataset, params: ForestParams = ForestParams(), use_oracle: bool = False,
        clamp=DEFAULT_CLAMP, centered: CenteredData | None = None) -> FitResult:
    """Full estimation pass on ``data``.

    A precomputed ``centered`` is reused as is, which lets the heterogeneity
    forest run on fewer covariates than the nuisance models.
    """
    if centered is None:
        centered = local_center(data, params, use_oracle=use_oracle, clamp=clamp)
    forest = grow_causal_forest(data.X, centered.y_res, centered.w_res, params,
                                feature_names=data.feature_names)
    oob = oob_cates(forest, centered)
    missing = np.flatnonzero(~np.isfinite(oob.tau))
    if missing.size:
        raise NoEligibleTrees(f"{missing.size} rows have no out-of-bag estimate; grow more trees",
                              rows=tuple(int(i) for i in missing))
    scores = dr_scores(centered, oob.tau, provenance={"forest_seed": params.seed, "oob": True})
    return FitResult(data, centered, forest, oob, scores)


def make_refit(data: Dataset, params: ForestParams, use_oracle: bool = False, clamp=DEFAULT_CLAMP):
    """``refit(idx)`` for :func:`inference.blp`: scores from a pipeline refit on rows ``idx``.

    Duplicated rows of a bootstrap draw are kept as separate observations.
    """
    counter = [0]

    def refit(idx):
        counter[0] += 1
        sub = data.subset(np.asarray(idx))
        sub = Dataset(X=sub.X, feature_names=sub.feature_names, W=sub.W, Y=sub.Y,
                      e_oracle=sub.e_oracle, extras=sub.extras)
        p = ForestParams(**{**params.__dict__, "seed": params.seed + counter[0]})
        return fit(sub, p, use_oracle=use_oracle, clamp=clamp).scores.gamma

    return refit
