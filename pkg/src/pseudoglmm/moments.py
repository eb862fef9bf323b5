"""Sample central moments and per-cluster summary bundles.

All moments use divisor ``n``.  Joint moments are indexed by a multi-index
``r = (r_1, ..., r_p)`` over the cluster's variable list, whose first entry
is always the binary response.  Order-1 entries hold plain means; entries
of total order >= 2 hold central moments.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from pseudoglmm.errors import (
    ClusterTooSmallError,
    ConfigurationError,
    DegenerateScaleError,
    InvalidInputError,
)

MultiIndex = tuple[int, ...]

RESPONSE = "binary_response"
NUMERIC = "numeric"
BINARY = "binary"
DUMMY = "dummy"
KINDS = (RESPONSE, NUMERIC, BINARY, DUMMY)
SUPPORTED_ORDERS = (2, 3, 4)


@dataclass(frozen=True)
class VariableMeta:
    name: str
    kind: str
    standardized: bool = False
    center: float = 0.0
    scale: float = 1.0
    level: str | None = None
    parent: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown variable kind {self.kind!r} for {self.name!r}")
        if self.standardized and not self.scale > 0:
            raise DegenerateScaleError(f"{self.name}: standardized with non-positive scale {self.scale}")
        if self.kind == DUMMY and (self.level is None or self.parent is None):
            raise InvalidInputError(f"dummy variable {self.name!r} needs level and parent")

    @property
    def is_binary(self) -> bool:
        return self.kind in (RESPONSE, BINARY, DUMMY)


@dataclass(frozen=True)
class MomentSpec:
    """Ordered set of moment targets implied by a variable list and order."""

    variables: tuple[str, ...]
    max_order: int
    indices: tuple[MultiIndex, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, index) -> bool:
        return tuple(index) in self._index_set

    @functools.cached_property
    def _index_set(self) -> frozenset:
        return frozenset(self.indices)

    def of_order(self, k: int) -> tuple[MultiIndex, ...]:
        return tuple(r for r in self.indices if sum(r) == k)

    def involving(self, position: int) -> tuple[MultiIndex, ...]:
        """Targets in which variable ``position`` appears and no later variable does."""
        return tuple(
            r for r in self.indices
            if r[position] > 0 and not any(r[position + 1:])
        )

    def layout_count(self) -> int:
        """Number of summary entries when laid out as mean vector and moment matrices.

        Order 2 is one symmetric matrix over all variables.  Each order ``k >= 3``
        is tabulated as ``k - 1`` symmetric predictor matrices (pure moments on
        the diagonals, two-variable moments off the diagonal) plus the
        moments involving three or more distinct predictors.  The diagonal
        is repeated in each matrix, so this exceeds ``len(self)`` whenever
        ``max_order >= 3``.
        """
        p = len(self.variables)
        q = p - 1
        count = p + p * (p + 1) // 2
        for k in range(3, self.max_order + 1):
            count += (k - 1) * q * (q + 1) // 2
            count += sum(1 for r in self.of_order(k) if sum(1 for e in r if e) >= 3)
        return count


def _indices_of_order(positions: Sequence[int], width: int, k: int) -> list[MultiIndex]:
    out = []
    for combo in itertools.combinations_with_replacement(positions, k):
        r = [0] * width
        for j in combo:
            r[j] += 1
        out.append(tuple(r))
    # lexicographically descending: (2,0,..) before (1,1,..) before (0,2,..)
    return sorted(set(out), reverse=True)


def enumerate_moment_spec(variables: Sequence[VariableMeta], max_order: int) -> MomentSpec:
    """Enumerate the moment targets for ``variables`` up to ``max_order``.

    Means of all variables, every order-2 moment over all variables, and for
    orders 3..max_order every multi-index over the predictors only.
    """
    if max_order not in SUPPORTED_ORDERS:
        raise ConfigurationError(f"max_order must be one of {SUPPORTED_ORDERS}, got {max_order!r}")
    _check_variable_list(variables)
    p = len(variables)
    everything = range(p)
    predictors = range(1, p)
    indices: list[MultiIndex] = []
    indices += _indices_of_order(everything, p, 1)
    indices += _indices_of_order(everything, p, 2)
    for k in range(3, max_order + 1):
        indices += _indices_of_order(predictors, p, k)
    return MomentSpec(tuple(v.name for v in variables), max_order, tuple(indices))


def _check_variable_list(variables: Sequence[VariableMeta]) -> None:
    if len(variables) < 2:
        raise InvalidInputError("need a response and at least one predictor")
    kinds = [v.kind for v in variables]
    if kinds.count(RESPONSE) != 1 or kinds[0] != RESPONSE:
        raise InvalidInputError("exactly one binary_response variable is required, listed first")
    names = [v.name for v in variables]
    if len(set(names)) != len(names):
        raise InvalidInputError(f"duplicate variable names in {names}")


def central_moment(x, r: int) -> float:
    """Univariate sample central moment ``mean((x - mean(x))**r)``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise InvalidInputError("central moment of an empty vector")
    if r < 1:
        raise InvalidInputError(f"order must be positive, got {r}")
    return float(np.mean((x - x.mean()) ** r))


def joint_central_moment(X, r: Sequence[int]) -> float:
    """Joint sample central moment of the columns of ``X`` with exponents ``r``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise InvalidInputError("X must be a 2-d array with variables in columns")
    r = tuple(int(e) for e in r)
    if X.shape[1] != len(r):
        raise InvalidInputError(f"multi-index of length {len(r)} for {X.shape[1]} columns")
    if any(e < 0 for e in r):
        raise InvalidInputError(f"negative exponent in {r}")
    if sum(r) < 2:
        raise InvalidInputError(f"joint central moments need total order >= 2, got {r}")
    if X.shape[0] == 0:
        raise InvalidInputError("joint moment of empty data")
    Xc = X - X.mean(axis=0)
    prod = np.ones(X.shape[0])
    for j, e in enumerate(r):
        if e:
            prod = prod * Xc[:, j] ** e
    return float(prod.mean())


def moments_for(Z: np.ndarray, indices: Sequence[MultiIndex]) -> np.ndarray:
    """Evaluate every index of ``indices`` on the columns of ``Z`` (two-pass)."""
    Z = np.asarray(Z, dtype=float)
    means = Z.mean(axis=0)
    Zc = Z - means
    top = max(sum(r) for r in indices)
    powers = [np.ones_like(Zc), Zc]
    for _ in range(2, top + 1):
        powers.append(powers[-1] * Zc)
    out = np.empty(len(indices))
    for i, r in enumerate(indices):
        if sum(r) == 1:
            out[i] = means[r.index(1)]
            continue
        prod = None
        for j, e in enumerate(r):
            if e:
                prod = powers[e][:, j] if prod is None else prod * powers[e][:, j]
        out[i] = prod.mean()
    return out


def encode_dummies(column: Sequence, levels: Sequence) -> np.ndarray:
    """Indicator columns for every level but the first (the reference)."""
    levels = list(levels)
    if len(levels) < 2:
        raise InvalidInputError("a categorical variable needs at least two levels")
    if len(set(levels)) != len(levels):
        raise InvalidInputError(f"repeated levels in {levels}")
    lookup = {lev: i for i, lev in enumerate(levels)}
    codes = []
    for value in column:
        if value not in lookup:
            raise InvalidInputError(f"value {value!r} is not among levels {levels}")
        codes.append(lookup[value])
    codes = np.asarray(codes, dtype=int)
    out = np.zeros((codes.size, len(levels) - 1))
    rows = np.nonzero(codes > 0)[0]
    out[rows, codes[rows] - 1] = 1.0
    return out


def standardize(column) -> tuple[np.ndarray, float, float]:
    """Center and scale to mean 0, divisor-n standard deviation 1."""
    x = np.asarray(column, dtype=float).ravel()
    if x.size == 0:
        raise InvalidInputError("cannot standardize an empty column")
    center = float(x.mean())
    scale = float(np.sqrt(np.mean((x - center) ** 2)))
    if not scale > 0 or scale <= 1e-12 * max(1.0, abs(center)):
        raise DegenerateScaleError("column is constant; cannot standardize")
    return (x - center) / scale, center, scale


@dataclass(frozen=True)
class ClusterData:
    """Individual-level records of one cluster; ``X`` excludes the response."""

    cluster_id: str
    y: np.ndarray
    X: np.ndarray
    variables: tuple[VariableMeta, ...] | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.size:
            raise InvalidInputError(f"cluster {self.cluster_id}: y has {y.size} rows, X has {X.shape[0]}")
        if y.size < 1:
            raise InvalidInputError(f"cluster {self.cluster_id} is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidInputError(f"cluster {self.cluster_id} has missing or non-finite entries")
        if not np.all((y == 0) | (y == 1)):
            raise InvalidInputError(f"cluster {self.cluster_id}: response must be 0/1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        if self.variables is None:
            object.__setattr__(self, "variables", default_variables(X))
        else:
            variables = tuple(self.variables)
            _check_variable_list(variables)
            if len(variables) != X.shape[1] + 1:
                raise InvalidInputError(
                    f"cluster {self.cluster_id}: {len(variables)} variables for {X.shape[1]} predictor columns")
            object.__setattr__(self, "variables", variables)

    @property
    def n(self) -> int:
        return self.y.size


def default_variables(X: np.ndarray, response: str = "y") -> tuple[VariableMeta, ...]:
    out = [VariableMeta(response, RESPONSE)]
    for j in range(X.shape[1]):
        col = X[:, j]
        kind = BINARY if np.all((col == 0) | (col == 1)) else NUMERIC
        out.append(VariableMeta(f"x{j + 1}", kind))
    return tuple(out)


@dataclass(frozen=True)
class SummaryBundle:
    """Privacy-preserving payload for one cluster."""

    cluster_id: str
    n: int
    variables: tuple[VariableMeta, ...]
    max_order: int
    moments: Mapping[MultiIndex, float]
    response_mean: float
    spec: MomentSpec = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "moments", {tuple(int(e) for e in k): float(v) for k, v in self.moments.items()})
        object.__setattr__(self, "spec", enumerate_moment_spec(self.variables, self.max_order))

    @property
    def predictors(self) -> tuple[VariableMeta, ...]:
        return self.variables[1:]

    @property
    def signature(self) -> tuple[tuple[str, str], ...]:
        return tuple((v.name, v.kind) for v in self.variables)

    def targets(self, indices: Sequence[MultiIndex]) -> np.ndarray:
        return np.array([self.moments[tuple(r)] for r in indices])

    def mean(self, position: int) -> float:
        r = [0] * len(self.variables)
        r[position] = 1
        return self.moments[tuple(r)]

    def variance(self, position: int) -> float:
        r = [0] * len(self.variables)
        r[position] = 2
        return self.moments[tuple(r)]

    def second_order_matrix(self) -> np.ndarray:
        """Covariance matrix (divisor n) over all variables."""
        p = len(self.variables)
        S = np.empty((p, p))
        for i in range(p):
            for j in range(i, p):
                r = [0] * p
                r[i] += 1
                r[j] += 1
                S[i, j] = S[j, i] = self.moments[tuple(r)]
        return S


def summarize_cluster(data: ClusterData, max_order: int, standardize_columns: bool | Sequence[str] = False) -> SummaryBundle:
    """Reduce a cluster to its moment targets.

    ``standardize_columns`` is ``True`` for every numeric predictor, or a
    collection of predictor names.  Moments of standardized columns are
    taken on the standardized scale; center and scale travel in the
    variable metadata.
    """
    if max_order not in SUPPORTED_ORDERS:
        raise ConfigurationError(f"max_order must be one of {SUPPORTED_ORDERS}, got {max_order!r}")
    if data.n < 2:
        raise ClusterTooSmallError(f"cluster {data.cluster_id} has {data.n} record(s); at least 2 are required")
    if standardize_columns is True:
        wanted = {v.name for v in data.variables[1:] if v.kind == NUMERIC}
    elif standardize_columns is False or standardize_columns is None:
        wanted = set()
    else:
        wanted = set(standardize_columns)
        unknown = wanted - {v.name for v in data.variables[1:]}
        if unknown:
            raise InvalidInputError(f"cannot standardize unknown predictors {sorted(unknown)}")

    columns = [data.y]
    variables = [data.variables[0]]
    for j, meta in enumerate(data.variables[1:]):
        col = data.X[:, j]
        if meta.kind == NUMERIC:
            if np.ptp(col) == 0:
                raise DegenerateScaleError(f"cluster {data.cluster_id}: numeric predictor {meta.name} is constant")
            if meta.name in wanted:
                col, center, scale = standardize(col)
                meta = VariableMeta(meta.name, meta.kind, True, center, scale, meta.level, meta.parent)
        elif meta.name in wanted:
            raise InvalidInputError(f"{meta.name} is {meta.kind}; only numeric predictors are standardized")
        columns.append(col)
        variables.append(meta)

    spec = enumerate_moment_spec(variables, max_order)
    values = moments_for(np.column_stack(columns), spec.indices)
    return SummaryBundle(
        cluster_id=str(data.cluster_id),
        n=int(data.n),
        variables=tuple(variables),
        max_order=max_order,
        moments=dict(zip(spec.indices, values.tolist())),
        response_mean=float(data.y.mean()),
    )
