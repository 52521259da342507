"""Synthetic data-generating processes with known treatment effects.

All designs draw ``X ~ U(0, 1)^p``. Columns are named ``x1 .. xp`` so ``x1``
below is ``X[:, 0]``.

===================  ==============================  ===================
name                 tau(x)                          assignment
===================  ==============================  ===================
constant_effect      ``tau``                         Bernoulli(0.5)
two_group            ``tau * 1{x1 > 0.5}``           Bernoulli(0.5)
smooth_interaction   ``tau + 2 (x1 - 0.5) sqrt(12)`` Bernoulli(0.5)
null_noise           0                               Bernoulli(0.5)
confounded           ``tau``                         logistic(c x1 - 1)
===================  ==============================  ===================

Randomized designs have a zero baseline and record ``e_oracle = 0.5``. The
confounded design uses baseline ``2 x2 + 2 x1`` so ``x1`` drives both
assignment and outcome, and records no oracle propensity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import Dataset
from .errors import InvalidParams, UnknownDgp

DGP_NAMES = ("constant_effect", "two_group", "smooth_interaction", "confounded", "null_noise")
_DEFAULT_TAU = {"constant_effect": 1.0, "two_group": 2.0, "smooth_interaction": 1.0,
                "confounded": 2.0, "null_noise": 0.0}


@dataclass(frozen=True)
class DgpSpec:
    """One simulation design.

    Parameters
    ----------
    name : str
        One of :data:`DGP_NAMES`.
    n, p : int
        Rows and covariates.
    tau : float, optional
        Effect level; defaults to 1 (2 for ``two_group`` and ``confounded``,
        0 for ``null_noise``).
    noise_sd : float
        Standard deviation of the Gaussian outcome noise.
    confounding : float
        Slope ``c`` of the assignment logit in the confounded design.
    seed : int
    """

    name: str
    n: int
    p: int = 10
    tau: float | None = None
    noise_sd: float = 1.0
    confounding: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in DGP_NAMES:
            raise UnknownDgp(f"unknown design {self.name!r}; choose from {', '.join(DGP_NAMES)}")
        if self.n < 10:
            raise InvalidParams("n must be at least 10")
        if self.p < 1:
            raise InvalidParams("p must be at least 1")
        if self.name == "confounded" and self.p < 2:
            raise InvalidParams("the confounded design needs p >= 2")
        if self.noise_sd < 0:
            raise InvalidParams("noise_sd must be non-negative")

    @property
    def tau_level(self) -> float:
        return _DEFAULT_TAU[self.name] if self.tau is None else float(self.tau)


def true_effect(spec: DgpSpec, X: np.ndarray) -> np.ndarray:
    """tau(x) of ``spec`` evaluated at the rows of ``X``."""
    X = np.asarray(X, float)
    t = spec.tau_level
    if spec.name == "null_noise":
        return np.zeros(X.shape[0])
    if spec.name == "two_group":
        return t * (X[:, 0] > 0.5)
    if spec.name == "smooth_interaction":
        return t + 2.0 * (X[:, 0] - 0.5) * np.sqrt(12.0)
    return np.full(X.shape[0], t)


def generate(spec: DgpSpec) -> tuple[Dataset, np.ndarray, float]:
    """Draw one dataset; returns ``(data, true_tau, true_ate)``."""
    rng = np.random.default_rng(spec.seed)
    n, p = spec.n, spec.p
    X = rng.uniform(size=(n, p))
    tau = true_effect(spec, X)
    if spec.name == "confounded":
        e = 1.0 / (1.0 + np.exp(-(spec.confounding * X[:, 0] - 1.0)))
        oracle = None
        baseline = 2.0 * X[:, 1] + 2.0 * X[:, 0]
    else:
        e = np.full(n, 0.5)
        oracle = e
        baseline = np.zeros(n)
    W = (rng.uniform(size=n) < e).astype(float)
    Y = baseline + tau * W + spec.noise_sd * rng.standard_normal(n)
    data = Dataset(X=X, feature_names=[f"x{j + 1}" for j in range(p)], W=W, Y=Y, e_oracle=oracle)
    return data, tau, float(tau.mean())


def truth_frame(data: Dataset, true_tau) -> pd.DataFrame:
    return pd.DataFrame({"row_id": data.row_ids, "true_tau": np.asarray(true_tau, float)})
