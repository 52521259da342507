"""Dataset ingestion, validation, first-differencing and holdout splitting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DegenerateSplit,
    EmptyFile,
    InvalidParams,
    MissingColumn,
    NonBinaryTreatment,
    NonFiniteValue,
    PropensityOutOfBounds,
)


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable analysis table.

    ``row_ids`` hold the position of each row in the originally loaded file and
    serve as the identity of every per-observation output. ``extras`` carries
    reserved numeric columns that are neither covariates nor roles (for example
    the pre/post outcomes of a panel design).
    """

    X: np.ndarray
    feature_names: tuple[str, ...]
    W: np.ndarray
    Y: np.ndarray
    e_oracle: np.ndarray | None = None
    groups: np.ndarray | None = None
    row_ids: np.ndarray | None = None
    extras: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        X = _frozen(self.X)
        if X.ndim != 2:
            raise InvalidParams("X must be a 2-d matrix")
        n, p = X.shape
        if p < 1:
            raise InvalidParams("at least one covariate is required")
        names = tuple(str(c) for c in self.feature_names)
        if len(names) != p:
            raise InvalidParams(f"{len(names)} feature names for {p} columns")
        if len(set(names)) != p:
            raise InvalidParams("feature names must be unique")
        W = _frozen(self.W)
        Y = _frozen(self.Y)
        if W.shape != (n,) or Y.shape != (n,):
            raise InvalidParams("W and Y must have one entry per row of X")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(Y)):
            raise NonFiniteValue(*_first_nonfinite(X, Y))
        if not np.all((W == 0) | (W == 1)):
            raise NonBinaryTreatment("treatment must be coded 0/1")
        e = None
        if self.e_oracle is not None:
            e = _frozen(self.e_oracle)
            if e.shape != (n,):
                raise InvalidParams("e_oracle must have one entry per row")
            if not np.all((e > 0) & (e < 1)):
                raise PropensityOutOfBounds("oracle propensities must lie strictly inside (0, 1)")
        g = None
        if self.groups is not None:
            g = np.array(self.groups, dtype=object, copy=True)
            if g.shape != (n,):
                raise InvalidParams("groups must have one entry per row")
            g.setflags(write=False)
        ids = np.arange(n) if self.row_ids is None else self.row_ids
        ids = _frozen(ids, dtype=np.int64)
        if ids.shape != (n,):
            raise InvalidParams("row_ids must have one entry per row")
        extras = {}
        for k, v in dict(self.extras).items():
            v = _frozen(v)
            if v.shape != (n,):
                raise InvalidParams(f"reserved column {k!r} has the wrong length")
            extras[str(k)] = v
        for name, value in [
            ("X", X), ("feature_names", names), ("W", W), ("Y", Y),
            ("e_oracle", e), ("groups", g), ("row_ids", ids), ("extras", extras),
        ]:
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx],
            W=self.W[idx],
            Y=self.Y[idx],
            e_oracle=None if self.e_oracle is None else self.e_oracle[idx],
            groups=None if self.groups is None else self.groups[idx],
            row_ids=self.row_ids[idx],
            extras={k: v[idx] for k, v in self.extras.items()},
        )

    def select_features(self, idx) -> "Dataset":
        idx = [int(i) for i in idx]
        return replace(self, X=self.X[:, idx], feature_names=[self.feature_names[i] for i in idx])

    def column(self, name: str) -> np.ndarray:
        """Look a numeric column up among reserved columns, then covariates."""
        if name in self.extras:
            return self.extras[name]
        if name in self.feature_names:
            return self.X[:, self.feature_names.index(name)]
        raise MissingColumn(f"column {name!r} not found")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.X, self.W, self.Y, self.row_ids):
            h.update(np.ascontiguousarray(a).tobytes())
        if self.e_oracle is not None:
            h.update(self.e_oracle.tobytes())
        for k in sorted(self.extras):
            h.update(k.encode())
            h.update(self.extras[k].tobytes())
        return h.hexdigest()

    def require_both_arms(self):
        if not (np.any(self.W == 0) and np.any(self.W == 1)):
            raise NonBinaryTreatment("treatment must contain both treated and control rows")


def _first_nonfinite(X, Y):
    bad = ~np.isfinite(X)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        return int(r), int(c), X[r, c]
    r = int(np.argmax(~np.isfinite(Y)))
    return r, "Y", Y[r]


@dataclass(frozen=True)
class Schema:
    """Column-role mapping for :func:`load_csv`.

    ``covariates=None`` means every column without another role.
    ``treatment_levels`` maps the two labels of a string treatment column to 0/1.
    """

    treatment: str
    outcome: str
    covariates: Sequence[str] | None = None
    oracle_propensity: str | None = None
    groups: str | None = None
    reserved: Sequence[str] = ()
    treatment_levels: Mapping[str, int] | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidParams(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FirstDifferenceSpec:
    pre_column: str
    post_column: str


@dataclass(frozen=True)
class SplitPair:
    train: Dataset
    holdout: Dataset
    seed: int


def _numeric(series: pd.Series, col: str, row_offset=0) -> np.ndarray:
    # astype parses with correct rounding; to_numeric's fast path does not
    try:
        values = series.astype(float).to_numpy()
    except ValueError:
        values = pd.to_numeric(series, errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        r = int(np.argmax(bad))
        raise NonFiniteValue(r + row_offset, col, series.iloc[r])
    return values


def load_csv(path, schema: Schema | Mapping) -> Dataset:
    """Read a comma separated file into a validated :class:`Dataset`.

    Any missing, non-numeric or infinite entry in a used column raises
    :class:`NonFiniteValue`; imputation is left to the caller.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_dict(schema)
    path = Path(path)
    if not path.exists():
        raise MissingColumn(f"file {str(path)!r} does not exist")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyFile(f"{path} is empty") from None
    if df.shape[0] == 0:
        raise EmptyFile(f"{path} has a header but no rows")

    roles = [schema.treatment, schema.outcome]
    for opt in (schema.oracle_propensity, schema.groups):
        if opt is not None:
            roles.append(opt)
    reserved = list(schema.reserved)
    for col in roles + reserved + list(schema.covariates or []):
        if col not in df.columns:
            raise MissingColumn(f"column {col!r} not in {path.name}")
    if schema.covariates is None:
        covariates = [c for c in df.columns if c not in roles and c not in reserved]
    else:
        covariates = list(schema.covariates)
        clash = set(covariates) & (set(roles) | set(reserved))
        if clash:
            raise InvalidParams(f"columns {sorted(clash)} cannot be both covariate and role")
    if not covariates:
        raise MissingColumn("no covariate columns")

    W = _parse_treatment(df[schema.treatment], schema.treatment_levels)
    Y = _numeric(df[schema.outcome], schema.outcome)
    X = np.column_stack([_numeric(df[c], c) for c in covariates])
    e = None
    if schema.oracle_propensity is not None:
        e = _numeric(df[schema.oracle_propensity], schema.oracle_propensity)
    groups = None if schema.groups is None else df[schema.groups].to_numpy(dtype=object)
    extras = {c: _numeric(df[c], c) for c in reserved}
    return Dataset(X=X, feature_names=covariates, W=W, Y=Y, e_oracle=e, groups=groups, extras=extras)


def _parse_treatment(series: pd.Series, levels) -> np.ndarray:
    if levels is not None:
        if len(levels) != 2 or sorted(levels.values()) != [0, 1]:
            raise InvalidParams("treatment_levels must map two labels onto 0 and 1")
        labels = series.str.strip()
        unknown = ~labels.isin(list(levels))
        if unknown.any():
            raise NonBinaryTreatment(f"unexpected treatment label {labels[unknown].iloc[0]!r}")
        return labels.map(dict(levels)).to_numpy(dtype=float)
    try:
        values = series.astype(float).to_numpy()
    except ValueError:
        values = pd.to_numeric(series, errors="coerce").to_numpy(dtype=float)
    if not np.all((values == 0) | (values == 1)):
        bad = series[~((values == 0) | (values == 1))].iloc[0]
        raise NonBinaryTreatment(f"treatment must be 0/1, found {bad!r}")
    return values


def write_csv(data: Dataset, path, treatment="W", outcome="Y", oracle="e_oracle", groups="group"):
    """Write ``data`` so that :func:`load_csv` reproduces X, W and Y exactly."""
    cols = {name: data.X[:, j] for j, name in enumerate(data.feature_names)}
    cols[treatment] = data.W.astype(int)
    cols[outcome] = data.Y
    if data.e_oracle is not None:
        cols[oracle] = data.e_oracle
    if data.groups is not None:
        cols[groups] = data.groups
    cols.update(data.extras)
    pd.DataFrame(cols).to_csv(path, index=False, float_format="%.17g")
    schema = Schema(
        treatment=treatment,
        outcome=outcome,
        covariates=list(data.feature_names),
        oracle_propensity=oracle if data.e_oracle is not None else None,
        groups=groups if data.groups is not None else None,
        reserved=list(data.extras),
    )
    return schema


def first_differences(data: Dataset, spec: FirstDifferenceSpec) -> Dataset:
    """Replace the outcome with ``post - pre``.

    Both columns must be reserved (kept out of the covariates); naming a
    covariate is rejected.
    """
    for col in (spec.pre_column, spec.post_column):
        if col in data.feature_names:
            raise MissingColumn(f"{col!r} is a covariate; first-difference columns must be reserved")
        if col not in data.extras:
            raise MissingColumn(f"reserved column {col!r} not found")
    dy = data.extras[spec.post_column] - data.extras[spec.pre_column]
    return replace(data, Y=dy)


def split_holdout(data: Dataset, fraction: float, seed: int) -> SplitPair:
    """Random disjoint train/holdout partition, ``fraction`` going to train.

    The smaller side is always the head of one seeded permutation, so the
    calls with ``fraction`` and ``1 - fraction`` return mirrored partitions.
    """
    n = data.n
    if not 0 < fraction < 1:
        raise DegenerateSplit(f"cannot split {n} rows with fraction {fraction}")
    small = int(np.floor(n * min(fraction, 1 - fraction) + 0.5))
    if small < 1 or n - small < 1:
        raise DegenerateSplit(f"cannot split {n} rows with fraction {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    head, tail = np.sort(perm[:small]), np.sort(perm[small:])
    train, hold = (head, tail) if fraction <= 0.5 else (tail, head)
    return SplitPair(train=data.subset(train), holdout=data.subset(hold), seed=seed)
