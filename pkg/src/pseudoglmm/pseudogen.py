"""Moment-matched pseudo-data for one cluster.

The binary response is generated first from the event proportion.  The
predictors follow one at a time, in bundle order: column ``j`` solves a
least-squares problem over every moment target that involves it and only
the response and predictors generated before it.  If a column with more
values than targets is left unmatched, all predictor columns are then
refined together, and as a last resort the whole cluster is redrawn.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pseudoglmm.errors import InvalidInputError
from pseudoglmm.moments import MultiIndex, SummaryBundle, moments_for
from pseudoglmm.optim import LmOptions, LmResult, lm_solve

log = logging.getLogger(__name__)

SSD_WARNING_LEVEL = 1e-6
# an exact match; restarts and retries aim for this, warnings use the level above
MATCHED_SSD = 1e-12
MAX_RESTARTS = 1
CLUSTER_RETRIES = 4


def default_lm_options(seed: int = 0) -> LmOptions:
    """LM settings for generation.

    The SSD floor sits well below 1e-12 so that every individual moment
    residual ends up far under 1e-6.
    """
    return LmOptions(tol_ssd=1e-20, seed=seed)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key]))


def cluster_seed(seed: int, cluster_id: str) -> int:
    """Per-cluster seed, independent of the order clusters are processed in."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(cluster_id.encode("utf-8"))])
    return int(ss.generate_state(2, np.uint64)[0] >> np.uint64(1))


def generate_response(n: int, p_bar: float, seed: int) -> np.ndarray:
    """Exactly ``round(n * p_bar)`` ones (halves round up), shuffled by ``seed``."""
    if n < 1:
        raise InvalidInputError(f"n must be positive, got {n}")
    if not 0.0 <= p_bar <= 1.0:
        raise InvalidInputError(f"event proportion {p_bar} is outside [0, 1]")
    ones = int(np.floor(n * p_bar + 0.5))
    y = np.zeros(n)
    y[:ones] = 1.0
    return _rng(seed, 0).permutation(y)


class MomentResiduals:
    """Residuals ``target - achieved`` for the targets of one unknown column.

    ``fixed`` holds the already generated columns (response first); the
    unknown column is appended after them at ``position``.  Each target
    factors into a fixed part ``F`` and a power of the centered unknown.
    """

    def __init__(self, fixed: np.ndarray, indices: Sequence[MultiIndex], targets: np.ndarray, position: int):
        self.indices = tuple(indices)
        self.targets = np.asarray(targets, dtype=float)
        self.position = position
        fixed = np.asarray(fixed, dtype=float)
        n = fixed.shape[0]
        centered = fixed - fixed.mean(axis=0)
        self._is_mean = np.array([sum(r) == 1 for r in self.indices])
        self._power = np.array([r[position] for r in self.indices])
        F = np.ones((len(self.indices), n))
        for i, r in enumerate(self.indices):
            for k, e in enumerate(r[:position]):
                if e:
                    F[i] *= centered[:, k] ** e
        self._F = F

    def _centered_powers(self, x):
        c = x - x.mean()
        top = int(self._power.max())
        P = np.empty((top + 1, x.size))
        P[0] = 1.0
        for k in range(1, top + 1):
            P[k] = P[k - 1] * c
        return P

    def achieved(self, x: np.ndarray) -> np.ndarray:
        P = self._centered_powers(x)
        out = np.mean(self._F * P[self._power], axis=1)
        out[self._is_mean] = x.mean()
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.targets - self.achieved(x)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        n = x.size
        P = self._centered_powers(x)
        G = self._F * P[np.maximum(self._power - 1, 0)]
        J = -(self._power / n)[:, None] * (G - G.mean(axis=1, keepdims=True))
        J[self._is_mean] = -1.0 / n
        return J


def _targets_for(bundle: SummaryBundle, j: int) -> tuple[MultiIndex, ...]:
    return bundle.spec.involving(j + 1)


def initialize_predictor(bundle: SummaryBundle, j: int, seed: int) -> np.ndarray:
    """Random start with the target mean and variance of predictor ``j``.

    Binary and dummy variables start from a 0/1 draw with the target mean,
    jittered by N(0, 0.1**2) so the Jacobian is not singular.
    """
    pos = j + 1
    meta = bundle.variables[pos]
    mean, var = bundle.mean(pos), bundle.variance(pos)
    rng = _rng(seed, pos, 1)
    if meta.is_binary:
        q = min(max(mean, 0.0), 1.0)
        return (rng.random(bundle.n) < q).astype(float) + rng.normal(0.0, 0.1, bundle.n)
    return rng.normal(mean, np.sqrt(max(var, 0.0)), bundle.n)


@dataclass(frozen=True)
class PredictorFit:
    x: np.ndarray
    ssd: float
    n_targets: int
    restarts: int
    lm: LmResult
    warning: str | None = None
    position: int = 0


def generate_predictor(bundle: SummaryBundle, j: int, y_pi: np.ndarray, X_prev: np.ndarray,
                       opts: LmOptions | None = None, seed: int | None = None) -> PredictorFit:
    """Solve for pseudo predictor ``j`` (0-based among predictors)."""
    opts = default_lm_options() if opts is None else opts
    seed = opts.seed if seed is None else seed
    n = bundle.n
    if not 0 <= j < len(bundle.predictors):
        raise InvalidInputError(f"predictor index {j} out of range")
    y_pi = np.asarray(y_pi, dtype=float).ravel()
    X_prev = np.asarray(X_prev, dtype=float).reshape(n, -1) if np.size(X_prev) else np.empty((n, 0))
    if y_pi.size != n or X_prev.shape[1] != j:
        raise InvalidInputError(f"predictor {j} needs the response and {j} earlier columns of length {n}")

    indices = _targets_for(bundle, j)
    residuals = MomentResiduals(np.column_stack([y_pi, X_prev]), indices, bundle.targets(indices), j + 1)

    # a fresh start may escape a poor local minimum
    best = None
    restarts = 0
    for attempt in range(1 + MAX_RESTARTS):
        x0 = initialize_predictor(bundle, j, seed + attempt)
        result = lm_solve(residuals, residuals.jacobian, x0, opts)
        if best is None or result.ssd < best.ssd:
            best = result
        restarts = attempt
        if best.ssd <= MATCHED_SSD or n <= len(indices):
            break

    warning = _predictor_warning(bundle, j, best.ssd, len(indices))
    return PredictorFit(best.solution, best.ssd, len(indices), restarts, best, warning, j)


def _predictor_warning(bundle: SummaryBundle, j: int, ssd: float, n_targets: int) -> str | None:
    name, n = bundle.variables[j + 1].name, bundle.n
    if ssd > SSD_WARNING_LEVEL:
        return (f"cluster {bundle.cluster_id}, {name}: SSD {ssd:.3g} "
                f"above {SSD_WARNING_LEVEL:g} ({n_targets} targets, n={n})")
    if n <= n_targets:
        return (f"cluster {bundle.cluster_id}, {name}: overdetermined, {n_targets} targets "
                f"for n={n} values (SSD {ssd:.3g})")
    return None


class JointMomentResiduals:
    """Residuals of every predictor target with all predictor columns unknown.

    The response stays fixed.  The unknown vector stacks the predictor
    columns one after another.
    """

    def __init__(self, y: np.ndarray, indices: Sequence[MultiIndex], targets: np.ndarray, p: int):
        self.y = np.asarray(y, dtype=float)
        self.indices = tuple(indices)
        self.targets = np.asarray(targets, dtype=float)
        self.p = p
        self.n = self.y.size
        self._top = max(max(r) for r in self.indices)

    def _powers(self, v: np.ndarray) -> np.ndarray:
        F = np.column_stack([self.y, v.reshape(self.p, self.n).T])
        C = F - F.mean(axis=0)
        P = np.empty((self._top + 1,) + C.shape)
        P[0] = 1.0
        for e in range(1, self._top + 1):
            P[e] = P[e - 1] * C
        return P

    def achieved(self, v: np.ndarray) -> np.ndarray:
        P = self._powers(v)
        out = np.empty(len(self.indices))
        for i, r in enumerate(self.indices):
            if sum(r) == 1:
                out[i] = np.mean(v.reshape(self.p, self.n)[r.index(1) - 1])
            else:
                out[i] = np.mean(np.prod([P[e, :, k] for k, e in enumerate(r)], axis=0))
        return out

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.targets - self.achieved(v)

    def jacobian(self, v: np.ndarray) -> np.ndarray:
        n = self.n
        P = self._powers(v)
        J = np.zeros((len(self.indices), self.p * n))
        for i, r in enumerate(self.indices):
            for k, e in enumerate(r):
                if k == 0 or e == 0:
                    continue
                block = slice((k - 1) * n, k * n)
                if sum(r) == 1:
                    J[i, block] = -1.0 / n
                    continue
                G = np.prod([P[e2 - (k2 == k), :, k2] for k2, e2 in enumerate(r)], axis=0)
                J[i, block] = -(e / n) * (G - G.mean())
        return J


def polish_columns(bundle: SummaryBundle, y_pi: np.ndarray, X: np.ndarray, opts: LmOptions) -> np.ndarray:
    """Refine all predictor columns together, starting from ``X``.

    Sequential generation holds earlier columns fixed, which can leave a
    later column with no exact solution even when it has more values than
    targets; moving the earlier columns as well removes that obstruction.
    """
    indices = tuple(r for r in bundle.spec.indices if any(r[1:]))
    residuals = JointMomentResiduals(y_pi, indices, bundle.targets(indices), X.shape[1])
    result = lm_solve(residuals, residuals.jacobian, X.T.ravel(), opts)
    return result.solution.reshape(X.shape[1], -1).T.copy()


def _column_ssd(bundle: SummaryBundle, y_pi: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Achieved SSD of each predictor over its own targets."""
    ssd = np.empty(X.shape[1])
    for j in range(X.shape[1]):
        indices = _targets_for(bundle, j)
        res = MomentResiduals(np.column_stack([y_pi, X[:, :j]]), indices, bundle.targets(indices), j + 1)
        ssd[j] = float(np.sum(res(X[:, j]) ** 2))
    return ssd


@dataclass(frozen=True)
class PseudoDataset:
    """Generated responses and predictors for one cluster.

    ``X_pi`` lives on the bundle's scale (standardized columns stay
    standardized); :meth:`original_scale` undoes the standardization.
    """

    cluster_id: str
    y_pi: np.ndarray
    X_pi: np.ndarray
    achieved_ssd_per_variable: np.ndarray
    generation_seed: int
    variables: tuple = ()
    warnings: tuple[str, ...] = ()
    attempts: int = 1

    @property
    def n(self) -> int:
        return self.y_pi.size

    def original_scale(self) -> np.ndarray:
        X = self.X_pi.copy()
        for j, meta in enumerate(self.variables[1:]):
            if meta.standardized:
                X[:, j] = X[:, j] * meta.scale + meta.center
        return X


@dataclass(frozen=True)
class DiagnosticRow:
    multi_index: MultiIndex
    target_value: float
    achieved_value: float

    @property
    def abs_difference(self) -> float:
        return abs(self.target_value - self.achieved_value)

    @property
    def order(self) -> int:
        return sum(self.multi_index)


@dataclass(frozen=True)
class MomentDiagnostics:
    cluster_id: str
    rows: tuple[DiagnosticRow, ...]

    def max_abs_difference(self, order: int | None = None) -> float:
        diffs = [r.abs_difference for r in self.rows if order is None or r.order == order]
        return max(diffs) if diffs else 0.0

    def worst_by_order(self) -> dict[int, float]:
        return {k: self.max_abs_difference(k) for k in sorted({r.order for r in self.rows})}


def moment_diagnostics(bundle: SummaryBundle, y_pi: np.ndarray, X_pi: np.ndarray) -> MomentDiagnostics:
    indices = bundle.spec.indices
    achieved = moments_for(np.column_stack([y_pi, X_pi]), indices)
    rows = tuple(DiagnosticRow(r, bundle.moments[r], float(a)) for r, a in zip(indices, achieved))
    return MomentDiagnostics(bundle.cluster_id, rows)


def generate_cluster(bundle: SummaryBundle, seed: int = 0, lm_options: LmOptions | None = None,
                     order: Sequence[int] | None = None) -> tuple[PseudoDataset, MomentDiagnostics]:
    """Generate a pseudo cluster from ``bundle``.

    ``order`` optionally permutes the predictors for generation; output
    columns always follow the bundle's variable order.
    """
    p = len(bundle.predictors)
    if order is not None:
        order = [int(k) for k in order]
        if sorted(order) != list(range(p)):
            raise InvalidInputError(f"generation order must be a permutation of 0..{p - 1}")
        bundle = _permuted_bundle(bundle, order)
    best = None
    for attempt in range(1 + CLUSTER_RETRIES):
        # later attempts redraw every column; the first uses ``seed`` itself
        attempt_seed = seed if attempt == 0 else retry_seed(seed, attempt)
        opts = default_lm_options(attempt_seed) if lm_options is None else lm_options
        y_pi, X, ssd = _generate_columns(bundle, attempt_seed, opts)
        if _any_solvable(bundle, ssd):
            polished = polish_columns(bundle, y_pi, X, opts)
            polished_ssd = _column_ssd(bundle, y_pi, polished)
            if polished_ssd.sum() < ssd.sum():
                X, ssd = polished, polished_ssd
        if best is None or ssd.max() < best[2].max():
            best = (y_pi, X, ssd, attempt)
        if not _any_solvable(bundle, ssd):
            break
    y_pi, X, ssd, attempt = best
    warnings = [_predictor_warning(bundle, j, ssd[j], len(_targets_for(bundle, j))) for j in range(p)]
    warnings = [w for w in warnings if w]
    for w in warnings:
        log.warning(w)
    if order is not None:
        inverse = np.argsort(order)
        X, ssd = X[:, inverse], ssd[inverse]
        bundle = _permuted_bundle(bundle, list(inverse))
    data = PseudoDataset(bundle.cluster_id, y_pi, X, ssd, int(seed), bundle.variables, tuple(warnings),
                         attempts=attempt + 1)
    return data, moment_diagnostics(bundle, y_pi, X)


def retry_seed(seed: int, attempt: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, attempt]).generate_state(1)[0])


def _any_solvable(bundle: SummaryBundle, ssd: np.ndarray) -> bool:
    """True when some column with more values than targets is still unmatched."""
    return any(value > MATCHED_SSD and bundle.n > len(_targets_for(bundle, j)) for j, value in enumerate(ssd))


def _generate_columns(bundle: SummaryBundle, seed: int, opts: LmOptions):
    p = len(bundle.predictors)
    y_pi = generate_response(bundle.n, bundle.response_mean, seed)
    X = np.empty((bundle.n, p))
    ssd = np.empty(p)
    for j in range(p):
        fit = generate_predictor(bundle, j, y_pi, X[:, :j], opts, seed=seed + 7919 * (j + 1))
        X[:, j] = fit.x
        ssd[j] = fit.ssd
    return y_pi, X, ssd


def _permuted_bundle(bundle: SummaryBundle, order: Sequence[int]) -> SummaryBundle:
    perm = [0] + [k + 1 for k in order]
    moments = {tuple(r[k] for k in perm): v for r, v in bundle.moments.items()}
    return SummaryBundle(bundle.cluster_id, bundle.n, tuple(bundle.variables[k] for k in perm),
                         bundle.max_order, moments, bundle.response_mean)
