"""Doubly robust scores and the estimands built on them.

The AIPW score of row ``i`` on locally centered quantities is

    G_i = tau_i + (W_i - e_i) / (e_i (1 - e_i)) * (y_res_i - w_res_i * tau_i)

with ``tau_i`` the out-of-bag CATE. Its mean is the AIPW average effect.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
from scipy import stats

from .errors import (
    DegeneratePredictionsWarning,
    InvalidParams,
    NotHeldOut,
    PropensityOutOfBounds,
    RankDeficient,
)

RATE_GRID = np.round(np.arange(1, 101) / 100.0, 2)


@dataclass(frozen=True, eq=False)
class DrScores:
    gamma: np.ndarray
    row_ids: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.gamma, float)
        if g.ndim != 1 or not np.all(np.isfinite(g)):
            raise InvalidParams("scores must be a finite vector")
        ids = np.asarray(self.row_ids, np.int64)
        if ids.shape != g.shape:
            raise InvalidParams("one row id per score is required")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "row_ids", ids)

    @property
    def n(self) -> int:
        return len(self.gamma)

    def subset(self, idx) -> "DrScores":
        idx = np.asarray(idx)
        return DrScores(self.gamma[idx], self.row_ids[idx], dict(self.provenance))


@dataclass(frozen=True)
class Estimate:
    point: float
    se: float

    def to_dict(self):
        return {"point": self.point, "se": self.se}


@dataclass(frozen=True)
class LinearProjection:
    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    t_stat: np.ndarray
    p_value: np.ndarray
    se_bootstrap: np.ndarray | None = None

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"term": list(self.names), "coef": self.coef, "se": self.se,
                           "t_stat": self.t_stat, "p_value": self.p_value})
        if self.se_bootstrap is not None:
            df["se_bootstrap"] = self.se_bootstrap
        return df


@dataclass(frozen=True)
class RateResult:
    weighting: str
    estimate: float
    se: float
    curve: pd.DataFrame

    def to_dict(self):
        return {"weighting": self.weighting, "estimate": self.estimate, "se": self.se}


@dataclass(frozen=True)
class CalibrationResult:
    mean_coef: float
    diff_coef: float
    se: tuple[float, float]
    t_stats: tuple[float, float]
    p_values: tuple[float, float]
    degenerate: bool = False

    def to_dict(self):
        return {"mean_coef": self.mean_coef, "diff_coef": self.diff_coef, "se": list(self.se),
                "t_stats": list(self.t_stats), "p_values": list(self.p_values),
                "degenerate": self.degenerate}


def dr_scores(centered, oob_tau, provenance: dict | None = None) -> DrScores:
    """AIPW scores from centered data and per-row out-of-bag CATEs."""
    tau = np.asarray(oob_tau, float)
    e = np.asarray(centered.e_hat, float)
    if tau.shape != (centered.n,):
        raise InvalidParams("oob_tau must have one entry per centered row")
    if not np.all(np.isfinite(tau)):
        raise InvalidParams(f"{int(np.sum(~np.isfinite(tau)))} CATE estimates are not finite")
    if not np.all((e > 0) & (e < 1)):
        bad = int(np.argmax(~((e > 0) & (e < 1))))
        raise PropensityOutOfBounds(f"propensity {e[bad]} at row {bad} is outside (0, 1)")
    w_res = np.asarray(centered.w_res, float)
    y_res = np.asarray(centered.y_res, float)
    W = np.asarray(centered.W, float)
    gamma = tau + (W - e) / (e * (1.0 - e)) * (y_res - w_res * tau)
    ids = np.arange(centered.n) if centered.row_ids is None else centered.row_ids
    prov = {"propensity_source": getattr(centered, "propensity_source", None)}
    prov.update(provenance or {})
    return DrScores(gamma, ids, prov)


def ate_aipw(scores: DrScores) -> Estimate:
    g = scores.gamma
    se = float(np.std(g, ddof=1) / np.sqrt(len(g))) if len(g) > 1 else float("nan")
    return Estimate(point=float(np.mean(g)), se=se)


def _ols_hc3(y, Z):
    """Least squares with HC3 sandwich standard errors."""
    n, k = Z.shape
    if np.linalg.matrix_rank(Z) < k:
        raise RankDeficient("design columns are linearly dependent")
    ZtZ_inv = np.linalg.inv(Z.T @ Z)
    coef = ZtZ_inv @ (Z.T @ y)
    resid = y - Z @ coef
    h = np.einsum("ij,jk,ik->i", Z, ZtZ_inv, Z)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = resid / (1.0 - h)
    meat = (Z * (u * u)[:, None]).T @ Z
    cov = ZtZ_inv @ meat @ ZtZ_inv
    return coef, np.sqrt(np.maximum(np.diag(cov), 0.0))


def blp(scores: DrScores, A=None, names=None, bootstrap_reps: int = 0,
        refit: Callable[[np.ndarray], np.ndarray] | None = None, seed: int = 0) -> LinearProjection:
    """Best linear projection of the scores on ``[1, A]``.

    Standard errors are HC3. With ``bootstrap_reps > 0`` rows are resampled
    with replacement; ``refit(idx)`` may return fresh scores for the resampled
    rows (for instance by refitting the forests), otherwise the original
    scores are reused. The bootstrap spread is reported as ``se_bootstrap``.
    """
    y = scores.gamma
    n = len(y)
    A = np.empty((n, 0)) if A is None else np.asarray(A, float)
    if A.ndim == 1:
        A = A[:, None]
    if A.shape[0] != n:
        raise InvalidParams("A needs one row per score")
    if names is None:
        names = [f"A{j + 1}" for j in range(A.shape[1])]
    if len(names) != A.shape[1]:
        raise InvalidParams("one name per column of A is required")
    Z = np.column_stack([np.ones(n), A])
    coef, se = _ols_hc3(y, Z)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    p = 2 * stats.norm.sf(np.abs(t))
    se_boot = None
    if bootstrap_reps > 0:
        rng = np.random.default_rng(seed)
        draws = np.empty((bootstrap_reps, Z.shape[1]))
        for r in range(bootstrap_reps):
            idx = rng.integers(0, n, n)
            yb = y[idx] if refit is None else np.asarray(refit(idx), float)
            Zb = Z[idx]
            draws[r] = np.linalg.lstsq(Zb, yb, rcond=None)[0]
        se_boot = draws.std(axis=0, ddof=1)
    return LinearProjection(("intercept", *names), coef, se, t, p, se_boot)


def _toc(gamma_sorted):
    """TOC at every k = 1..n; the last entry is exactly zero."""
    cum = np.cumsum(gamma_sorted)
    k = np.arange(1, len(gamma_sorted) + 1)
    means = cum / k
    return means - means[-1]


def _tie_averaged(priority, gamma):
    """Scores ordered by decreasing priority, averaged within ties."""
    order = np.argsort(-priority, kind="mergesort")
    pr = priority[order]
    g = gamma[order]
    _, start, counts = np.unique(-pr, return_index=True, return_counts=True)
    sums = np.add.reduceat(g, start)
    return np.repeat(sums / counts, counts)


def _rate_value(toc, weighting):
    n = len(toc)
    if weighting == "AUTOC":
        return float(np.mean(toc))
    return float(np.mean(toc * np.arange(1, n + 1) / n))


def rate(priority, scores: DrScores, weighting: str = "AUTOC", *, train_ids,
         reps: int = 200, seed: int = 0) -> RateResult:
    """Rank-weighted average treatment effect on held-out rows.

    Rows are ranked by decreasing ``priority``; ties share their average
    score. ``TOC(q)`` is the mean score of the top ``ceil(q n)`` rows minus
    the overall mean. AUTOC averages the TOC over ranks, QINI weights rank
    ``k`` by ``k / n``. The standard error is the spread of the estimate over
    ``reps`` half-samples drawn without replacement.

    ``train_ids`` are the rows used to fit whatever produced ``priority``;
    any overlap with the score rows raises :class:`NotHeldOut`.
    """
    weighting = weighting.upper()
    if weighting not in ("AUTOC", "QINI"):
        raise InvalidParams("weighting must be AUTOC or QINI")
    priority = np.asarray(priority, float)
    if priority.shape != scores.gamma.shape:
        raise InvalidParams("one priority per score is required")
    overlap = np.intersect1d(np.asarray(train_ids, np.int64), scores.row_ids)
    if overlap.size:
        raise NotHeldOut(f"{overlap.size} score rows were used to fit the priority rule")
    n = len(priority)
    if n < 2:
        raise InvalidParams("at least two held-out rows are required")
    toc = _toc(_tie_averaged(priority, scores.gamma))
    est = _rate_value(toc, weighting)
    rng = np.random.default_rng(seed)
    half = n // 2
    boot = np.empty(reps)
    toc_boot = np.empty((reps, len(RATE_GRID)))
    for r in range(reps):
        idx = rng.choice(n, half, replace=False)
        tb = _toc(_tie_averaged(priority[idx], scores.gamma[idx]))
        boot[r] = _rate_value(tb, weighting)
        toc_boot[r] = tb[_grid_index(half)]
    se = float(np.std(boot, ddof=1)) if reps > 1 else float("nan")
    curve = pd.DataFrame({"p": RATE_GRID, "toc": toc[_grid_index(n)],
                          "se": toc_boot.std(axis=0, ddof=1) if reps > 1 else np.nan})
    return RateResult(weighting, est, se, curve)


def _grid_index(n):
    k = np.ceil(RATE_GRID * n - 1e-9).astype(np.int64)
    return np.clip(k, 1, n) - 1


def calibration_test(oob_tau, scores: DrScores) -> CalibrationResult:
    """Regress the scores on ``mean(tau)`` and ``tau - mean(tau)`` without intercept.

    A ``diff_coef`` significantly above zero signals heterogeneity picked up
    by the forest. p-values are one-sided (coefficient > 0). Numerically
    constant predictions give a warning and NaN for the difference term.
    """
    tau = np.asarray(oob_tau, float)
    y = scores.gamma
    if tau.shape != y.shape:
        raise InvalidParams("one prediction per score is required")
    mean = float(np.mean(tau))
    diff = tau - mean
    if np.ptp(tau) <= 1e-12 * max(1.0, abs(mean)):
        warnings.warn("CATE predictions are constant; the differential term is undefined",
                      DegeneratePredictionsWarning, stacklevel=2)
        coef, se = _ols_hc3(y, np.full((len(y), 1), mean))
        t = coef[0] / se[0]
        nan = float("nan")
        return CalibrationResult(float(coef[0]), nan, (float(se[0]), nan), (float(t), nan),
                                 (float(stats.norm.sf(t)), nan), degenerate=True)
    Z = np.column_stack([np.full(len(y), mean), diff])
    coef, se = _ols_hc3(y, Z)
    t = coef / se
    p = stats.norm.sf(t)
    return CalibrationResult(float(coef[0]), float(coef[1]), (float(se[0]), float(se[1])),
                             (float(t[0]), float(t[1])), (float(p[0]), float(p[1])))
