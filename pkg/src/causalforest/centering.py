"""Local centering with out-of-bag nuisance forests."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .data import Dataset
from .errors import InvalidParams, MissingOraclePropensity
from .forest import ForestParams, derive_seed, grow_regression_forest, predict_oob

DEFAULT_CLAMP = (0.01, 0.99)
ESTIMATED = "estimated"
ORACLE = "oracle"


@dataclass(frozen=True, eq=False)
class CenteredData:
    m_hat: np.ndarray
    e_hat: np.ndarray
    y_res: np.ndarray
    w_res: np.ndarray
    propensity_source: str
    Y: np.ndarray
    W: np.ndarray
    row_ids: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.y_res)

    def subset(self, idx) -> "CenteredData":
        idx = np.asarray(idx)
        return replace(self, m_hat=self.m_hat[idx], e_hat=self.e_hat[idx], y_res=self.y_res[idx],
                       w_res=self.w_res[idx], Y=self.Y[idx], W=self.W[idx],
                       row_ids=None if self.row_ids is None else self.row_ids[idx])

    def with_outcome(self, Y, m_hat) -> "CenteredData":
        Y = np.asarray(Y, float)
        m_hat = np.asarray(m_hat, float)
        return replace(self, Y=Y, m_hat=m_hat, y_res=Y - m_hat)

    def to_frame(self) -> pd.DataFrame:
        ids = np.arange(self.n) if self.row_ids is None else self.row_ids
        return pd.DataFrame({"row_id": ids, "Y": self.Y, "W": self.W, "m_hat": self.m_hat,
                             "e_hat": self.e_hat, "y_res": self.y_res, "w_res": self.w_res})

    @classmethod
    def from_frame(cls, df: pd.DataFrame, propensity_source=ESTIMATED) -> "CenteredData":
        return cls(m_hat=df["m_hat"].to_numpy(float), e_hat=df["e_hat"].to_numpy(float),
                   y_res=df["y_res"].to_numpy(float), w_res=df["w_res"].to_numpy(float),
                   propensity_source=propensity_source, Y=df["Y"].to_numpy(float),
                   W=df["W"].to_numpy(float), row_ids=df["row_id"].to_numpy(np.int64))


def nuisance_params(params: ForestParams, which: int) -> ForestParams:
    """Nuisance forests reuse ``params`` with their own derived seed."""
    return replace(params, seed=derive_seed(params.seed, 100 + which))


def fit_outcome_model(data: Dataset, params: ForestParams) -> np.ndarray:
    forest = grow_regression_forest(data.X, data.Y, nuisance_params(params, 1))
    return predict_oob(forest)


def fit_propensity_model(data: Dataset, params: ForestParams, clamp=DEFAULT_CLAMP) -> np.ndarray:
    forest = grow_regression_forest(data.X, data.W, nuisance_params(params, 2))
    return np.clip(predict_oob(forest), clamp[0], clamp[1])


def local_center(data: Dataset, params: ForestParams = ForestParams(), use_oracle: bool = False,
                 clamp=DEFAULT_CLAMP) -> CenteredData:
    """Out-of-bag outcome and propensity fits and the residuals against them.

    With ``use_oracle`` the known assignment probabilities replace the
    propensity forest, which is then never grown.
    """
    lo, hi = clamp
    if not 0 < lo < hi < 1:
        raise InvalidParams("clamp bounds must satisfy 0 < lo < hi < 1")
    data.require_both_arms()
    if use_oracle:
        if data.e_oracle is None:
            raise MissingOraclePropensity("use_oracle requested but the dataset has no oracle propensities")
        e_hat = np.array(data.e_oracle, dtype=float)
        source = ORACLE
    else:
        e_hat = fit_propensity_model(data, params, clamp)
        source = ESTIMATED
    m_hat = fit_outcome_model(data, params)
    Y = np.array(data.Y, dtype=float)
    W = np.array(data.W, dtype=float)
    return CenteredData(m_hat=m_hat, e_hat=e_hat, y_res=Y - m_hat, w_res=W - e_hat,
                        propensity_source=source, Y=Y, W=W, row_ids=np.array(data.row_ids))
