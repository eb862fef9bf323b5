"""Numerical kernels: Levenberg-Marquardt, BFGS ascent, Gauss-Hermite rules."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from pseudoglmm.errors import ConfigurationError, InvalidInputError, InvalidStartError

log = logging.getLogger(__name__)

SSD_FLOOR = "ssd_floor"
STEP_FLOOR = "step_floor"
GRAD_FLOOR = "grad_floor"
MAX_ITER = "max_iter"

# damping relative to max diag(J^T J); beyond this the search is hopeless
_DAMPING_CEILING = 1e12


@dataclass(frozen=True)
class LmOptions:
    """Settings for :func:`lm_solve`.

    ``max_iterations=None`` means ``400 * len(x0)``.  ``initial_damping`` is
    relative to the largest diagonal entry of ``J^T J`` at the start.
    """

    max_iterations: int | None = None
    tol_ssd: float = 1e-10
    tol_step: float = 1e-10
    tol_grad: float = 1e-10
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("tol_ssd", "tol_step", "tol_grad", "initial_damping"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if not self.damping_up > 1:
            raise ConfigurationError("damping_up must exceed 1")
        if not 0 < self.damping_down < 1:
            raise ConfigurationError("damping_down must lie in (0, 1)")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be at least 1")


@dataclass(frozen=True)
class LmResult:
    solution: np.ndarray
    ssd: float
    iterations: int
    converged_by: str
    ssd_history: tuple[float, ...] = field(default=(), repr=False)


def forward_difference_jacobian(fun: Callable, x: np.ndarray, f0: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    f0 = fun(x) if f0 is None else f0
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = max(1e-7, 1e-7 * abs(x[j]))
        xh = x.copy()
        xh[j] += h
        J[:, j] = (fun(xh) - f0) / h
    return J


def _damped_step(J: np.ndarray, r: np.ndarray, mu: float) -> np.ndarray:
    m, n = J.shape
    if m < n:
        # (J^T J + mu I)^-1 J^T == J^T (J J^T + mu I)^-1, an m x m solve
        A = J @ J.T
        A[np.diag_indices_from(A)] += mu
        return -J.T @ np.linalg.solve(A, r)
    A = J.T @ J
    A[np.diag_indices_from(A)] += mu
    return -np.linalg.solve(A, J.T @ r)


def lm_solve(residual_fn: Callable, jacobian_fn: Callable | None, x0, opts: LmOptions | None = None) -> LmResult:
    """Minimize ``sum(residual_fn(x)**2)`` by Levenberg-Marquardt.

    ``jacobian_fn`` may be ``None``, in which case forward differences are
    used.  Accepted steps never increase the SSD.
    """
    opts = LmOptions() if opts is None else opts
    x = np.array(x0, dtype=float)
    max_iter = opts.max_iterations or 400 * x.size

    def jac(z, rz):
        if jacobian_fn is None:
            return forward_difference_jacobian(residual_fn, z, rz)
        return np.asarray(jacobian_fn(z), dtype=float)

    r = np.asarray(residual_fn(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise InvalidStartError("residuals are not finite at the starting point")
    ssd = float(r @ r)
    history = [ssd]
    J = jac(x, r)
    scale = max(float(np.max(np.sum(J * J, axis=0))) if J.size else 1.0, 1e-300)
    mu = opts.initial_damping * scale

    converged_by = MAX_ITER
    iterations = 0
    while iterations < max_iter:
        if ssd < opts.tol_ssd:
            converged_by = SSD_FLOOR
            break
        g = J.T @ r
        if np.max(np.abs(g)) < opts.tol_grad:
            converged_by = GRAD_FLOOR
            break
        iterations += 1
        try:
            step = _damped_step(J, r, mu)
        except np.linalg.LinAlgError:
            mu *= opts.damping_up
            continue
        if np.linalg.norm(step) <= opts.tol_step * (np.linalg.norm(x) + opts.tol_step):
            converged_by = STEP_FLOOR
            break
        x_new = x + step
        r_new = np.asarray(residual_fn(x_new), dtype=float)
        ssd_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        if ssd_new <= ssd:
            x, r, ssd = x_new, r_new, ssd_new
            history.append(ssd)
            J = jac(x, r)
            mu = max(mu * opts.damping_down, 1e-300)
        else:
            mu *= opts.damping_up
            if not np.isfinite(ssd_new) and mu > _DAMPING_CEILING * scale:
                raise ArithmeticError("residuals stay non-finite even for heavily damped steps")
    return LmResult(x, ssd, iterations, converged_by, tuple(history))


@dataclass(frozen=True)
class MaxOptions:
    max_iterations: int = 500
    gtol: float = 1e-6
    ftol: float = 1e-12
    max_halvings: int = 50
    hessian_step: float = 1e-4


@dataclass(frozen=True)
class MaxResult:
    """Result of :func:`maximize_loglik`.

    ``neg_hessian`` is minus the Hessian of ``f`` at ``x`` (the observed
    information when ``f`` is a log-likelihood).
    """

    x: np.ndarray
    value: float
    converged: bool
    neg_hessian: np.ndarray
    iterations: int
    message: str = ""


def central_difference_gradient(f: Callable, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty(x.size)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2 * h)
    return g


def jacobian_of_gradient(grad: Callable, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Symmetrized central-difference Jacobian of a gradient map."""
    x = np.asarray(x, dtype=float)
    H = np.empty((x.size, x.size))
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        H[:, j] = (grad(xp) - grad(xm)) / (2 * h)
    return 0.5 * (H + H.T)


def maximize_loglik(f: Callable, grad: Callable | None, x0, opts: MaxOptions | None = None) -> MaxResult:
    """BFGS ascent with backtracking (Armijo) line search.

    A line search that fails after ``max_halvings`` halvings ends the run
    with ``converged=False``; the current estimates are still returned.
    """
    opts = MaxOptions() if opts is None else opts
    if grad is None:
        def grad(z):
            return central_difference_gradient(f, z)
    x = np.array(x0, dtype=float)
    fx = float(f(x))
    if not np.isfinite(fx):
        raise InvalidInputError("objective is not finite at the starting point")
    g = np.asarray(grad(x), dtype=float)
    n = x.size
    Hinv = np.eye(n)
    converged = False
    message = "iteration limit reached"
    it = 0
    for it in range(1, opts.max_iterations + 1):
        if np.max(np.abs(g)) < opts.gtol:
            converged, message = True, "gradient below tolerance"
            break
        d = Hinv @ g
        slope = float(g @ d)
        if not slope > 0:
            Hinv = np.eye(n)
            d = g.copy()
            slope = float(g @ d)
        t = 1.0
        for _ in range(opts.max_halvings):
            x_new = x + t * d
            f_new = float(f(x_new))
            if np.isfinite(f_new) and f_new >= fx + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            message = "line search failed"
            break
        g_new = np.asarray(grad(x_new), dtype=float)
        s = x_new - x
        yv = g - g_new  # curvature pair for the minimization of -f
        f_old = fx
        x, fx, g = x_new, f_new, g_new
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        if abs(fx - f_old) <= opts.ftol * max(1.0, abs(fx)) and np.max(np.abs(g)) < 1e3 * opts.gtol:
            converged, message = True, "objective change below tolerance"
            break
    else:
        if np.max(np.abs(g)) < opts.gtol:
            converged, message = True, "gradient below tolerance"
    neg_hessian = -jacobian_of_gradient(grad, x, opts.hessian_step)
    return MaxResult(x, fx, converged, neg_hessian, it, message)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for expectations against the standard normal."""

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return self.nodes.size

    def expect(self, g: Callable) -> float:
        return float(np.sum(self.weights * g(self.nodes)))


def gauss_hermite_rule(k: int) -> QuadratureRule:
    """k-point Gauss-Hermite rule for the standard normal density."""
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= 100:
        raise ConfigurationError(f"number of quadrature points must be in 1..100, got {k!r}")
    nodes, weights = np.polynomial.hermite_e.hermegauss(int(k))
    weights = weights / weights.sum()
    # enforce exact symmetry
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(nodes, weights)


def check_gradient(f: Callable, grad: Callable, x) -> float:
    """Largest ``|g - g_fd| / (1 + |g|)`` over coordinates, central differences."""
    x = np.asarray(x, dtype=float)
    with np.errstate(all="ignore"):
        g = np.asarray(grad(x), dtype=float)
        fd = np.empty(x.size)
        for j in range(x.size):
            h = 1e-5 * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd[j] = (f(xp) - f(xm)) / (2 * h)
        err = np.abs(g - fd) / (1.0 + np.abs(g))
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(np.max(err)) if err.size else 0.0
