"""Identification checks: overlap, trimming, falsification refits and pre-trends."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .cate import MIN_DENOMINATOR, _causal_query
from .centering import DEFAULT_CLAMP, CenteredData
from .data import Dataset
from .errors import DegenerateKernel, EmptyAfterTrim, InvalidParams, NoEligibleTrees
from .forest import Forest, ForestParams, derive_seed
from .inference import ate_aipw
from .pipeline import fit

DEFAULT_TRIM = (0.05, 0.95)
MASS_THRESHOLD = 0.05
Z_CRIT = stats.norm.ppf(0.975)


def _check_bounds(bounds):
    lo, hi = map(float, bounds)
    if not 0 < lo < hi < 1:
        raise InvalidParams("bounds must satisfy 0 < lo < hi < 1")
    return lo, hi


@dataclass(frozen=True)
class OverlapReport:
    edges: np.ndarray
    treated_counts: np.ndarray
    control_counts: np.ndarray
    treated_range: tuple[float, float]
    control_range: tuple[float, float]
    trim_bounds: tuple[float, float]
    share_outside: float
    flagged_bins: tuple[int, ...]

    @property
    def flag(self) -> bool:
        return len(self.flagged_bins) > 0

    def to_dict(self):
        return {
            "edges": self.edges.tolist(),
            "treated_counts": self.treated_counts.tolist(),
            "control_counts": self.control_counts.tolist(),
            "treated_range": list(self.treated_range),
            "control_range": list(self.control_range),
            "trim_bounds": list(self.trim_bounds),
            "share_outside": self.share_outside,
            "flagged_bins": list(self.flagged_bins),
            "flag": self.flag,
        }


def overlap_report(centered: CenteredData, bins: int = 20, trim_bounds=DEFAULT_TRIM) -> OverlapReport:
    """Propensity histograms per arm over ``[0, 1]``.

    A bin is flagged when one arm has no rows in it while the other arm has
    at least 5% of its rows there. ``share_outside`` counts rows strictly
    outside the closed interval ``trim_bounds``.
    """
    if bins < 1:
        raise InvalidParams("bins must be positive")
    lo, hi = _check_bounds(trim_bounds)
    e = np.asarray(centered.e_hat, float)
    W = np.asarray(centered.W, float)
    edges = np.linspace(0.0, 1.0, bins + 1)
    t_counts = np.histogram(e[W == 1], bins=edges)[0]
    c_counts = np.histogram(e[W == 0], bins=edges)[0]
    nt, nc = max(int(t_counts.sum()), 1), max(int(c_counts.sum()), 1)
    flagged = tuple(
        int(k) for k in range(bins)
        if (t_counts[k] == 0 and c_counts[k] / nc >= MASS_THRESHOLD)
        or (c_counts[k] == 0 and t_counts[k] / nt >= MASS_THRESHOLD)
    )

    def rng_of(v):
        return (float(v.min()), float(v.max())) if v.size else (float("nan"), float("nan"))

    return OverlapReport(
        edges=edges, treated_counts=t_counts, control_counts=c_counts,
        treated_range=rng_of(e[W == 1]), control_range=rng_of(e[W == 0]),
        trim_bounds=(lo, hi), share_outside=float(np.mean((e < lo) | (e > hi))),
        flagged_bins=flagged,
    )


@dataclass(frozen=True, eq=False)
class TrimResult:
    data: Dataset
    centered: CenteredData
    kept: np.ndarray
    removed: int


def trim_by_propensity(data: Dataset, centered: CenteredData, bounds=DEFAULT_TRIM) -> TrimResult:
    """Drop rows whose propensity lies outside the closed interval ``bounds``."""
    lo, hi = _check_bounds(bounds)
    if centered.n != data.n:
        raise InvalidParams("data and centered rows disagree")
    e = np.asarray(centered.e_hat, float)
    kept = np.flatnonzero((e >= lo) & (e <= hi))
    if kept.size == 0:
        raise EmptyAfterTrim(f"no row has a propensity inside [{lo}, {hi}]")
    return TrimResult(data.subset(kept), centered.subset(kept), kept, int(data.n - kept.size))


@dataclass(frozen=True)
class FalsificationResult:
    name: str
    ate: np.ndarray
    se: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return self.ate / self.se

    @property
    def reject_at_05(self) -> np.ndarray:
        return np.abs(self.z) > Z_CRIT

    @property
    def rejection_share(self) -> float:
        return float(np.mean(self.reject_at_05))

    def to_dict(self):
        return {"name": self.name, "ate": self.ate.tolist(), "se": self.se.tolist(),
                "reject_at_05": self.reject_at_05.tolist(),
                "rejection_share": self.rejection_share}


def placebo_treatment_test(data: Dataset, params: ForestParams = ForestParams(), reps: int = 1,
                           seed: int = 0, clamp=DEFAULT_CLAMP) -> FalsificationResult:
    """Refit with synthetic treatments drawn independently as Bernoulli(mean(W)).

    The synthetic assignment probability is known, so it is passed as the
    oracle propensity. Its true effect is zero; frequent rejections point to
    a broken pipeline.
    """
    p1 = float(np.mean(data.W))
    ates, ses = [], []
    for r in range(reps):
        rng = np.random.default_rng(derive_seed(seed, 200, r))
        Wp = (rng.uniform(size=data.n) < p1).astype(float)
        fake = replace(data, W=Wp, e_oracle=np.full(data.n, p1))
        est = ate_aipw(fit(fake, replace(params, seed=derive_seed(params.seed, 201, r)),
                           use_oracle=True, clamp=clamp).scores)
        ates.append(est.point)
        ses.append(est.se)
    return FalsificationResult("placebo_treatment", np.array(ates), np.array(ses))


def dummy_outcome_test(data: Dataset, outcome: str = "random_noise",
                       params: ForestParams = ForestParams(), seed: int = 0, reps: int = 1,
                       use_oracle: bool | None = None, clamp=DEFAULT_CLAMP) -> FalsificationResult:
    """Refit with the outcome swapped for noise or an unrelated named column.

    ``outcome="random_noise"`` draws standard normal outcomes; any other
    value names a reserved column or covariate (for instance a pre-period
    outcome). A significant effect on such an outcome signals confounding.
    ``use_oracle=None`` uses oracle propensities whenever the data has them.
    """
    if use_oracle is None:
        use_oracle = data.e_oracle is not None
    ates, ses = [], []
    for r in range(reps):
        if outcome == "random_noise":
            Yd = np.random.default_rng(derive_seed(seed, 300, r)).standard_normal(data.n)
        else:
            Yd = data.column(outcome)
        fake = replace(data, Y=Yd)
        est = ate_aipw(fit(fake, replace(params, seed=derive_seed(params.seed, 301, r)),
                           use_oracle=use_oracle, clamp=clamp).scores)
        ates.append(est.point)
        ses.append(est.se)
    return FalsificationResult(f"dummy_outcome:{outcome}", np.array(ates), np.array(ses))


@dataclass(frozen=True)
class TrendCheck:
    gap: np.ndarray
    se: np.ndarray
    experimental: bool = True

    @property
    def flagged(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.abs(self.gap) / self.se > Z_CRIT

    def to_dict(self):
        return {"gap": self.gap.tolist(), "se": self.se.tolist(),
                "flagged": self.flagged.tolist(), "experimental": self.experimental}


def parallel_trends_check(forest: Forest, centered_pre: CenteredData, x_points) -> TrendCheck:
    """Kernel-weighted treated-vs-control gap in pre-period outcome changes.

    ``forest`` is the first-differences forest and ``centered_pre`` carries
    the centered pre-period change as outcome on the same rows. Each gap
    reuses the forest kernel exactly like a CATE, so a gap far from zero
    marks a neighbourhood where the untreated trends differ. Experimental.
    """
    X = np.atleast_2d(np.asarray(x_points, float))
    res = _causal_query(forest, centered_pre.y_res, centered_pre.w_res, X, None)
    st = res["status"]
    if np.any(st == 1):
        raise NoEligibleTrees("no tree is eligible at some query point")
    if np.any(st == 2):
        raise DegenerateKernel(f"kernel-weighted treatment variation below {MIN_DENOMINATOR}")
    return TrendCheck(gap=res["point"], se=np.sqrt(res["var"]))


def diagnostics_report(**entries) -> dict:
    """Machine-readable report; each entry carries its own pass/flag fields."""
    out = {"tests": []}
    for name, value in entries.items():
        d = value.to_dict() if hasattr(value, "to_dict") else dict(value)
        out["tests"].append({"test": name, **d})
    return out


def write_report(report: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=True)
