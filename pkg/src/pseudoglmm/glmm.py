"""Fixed-effects and random-intercept logistic regression by maximum likelihood.

The random-intercept marginal likelihood integrates each cluster's
conditional Bernoulli likelihood against ``N(0, sigma_u**2)`` with
(adaptive) Gauss-Hermite quadrature.  The outer optimizer works on
``(beta, log sigma_u)``.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import expit, logsumexp

from pseudoglmm.errors import ConfigurationError, InvalidInputError
from pseudoglmm.optim import MaxOptions, QuadratureRule, gauss_hermite_rule, maximize_loglik

log = logging.getLogger(__name__)

INTERCEPT = "(Intercept)"
SIGMA = "sigma_u"
LOG_SIGMA_BOUNDARY = -10.0
_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def _log1pexp(eta):
    return np.logaddexp(0.0, eta)


def _check_design(y, X):
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.size:
        raise InvalidInputError(f"y has {y.size} rows but X has {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("design matrix has non-finite entries")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidInputError("response must be 0/1")
    return y, X


def logistic_loglik(beta, y, X) -> float:
    """Bernoulli log-likelihood with logit link; ``X`` carries the intercept column."""
    y, X = _check_design(y, X)
    eta = X @ np.asarray(beta, dtype=float)
    return float(y @ eta - np.sum(_log1pexp(eta)))


def logistic_grad(beta, y, X) -> np.ndarray:
    y, X = _check_design(y, X)
    return X.T @ (y - expit(X @ np.asarray(beta, dtype=float)))


@dataclass(frozen=True)
class FixedFit:
    names: tuple[str, ...]
    beta: np.ndarray
    se: np.ndarray
    loglik: float
    converged: bool
    vcov: np.ndarray
    n_obs: int
    iterations: int
    message: str = ""

    @property
    def n_params(self) -> int:
        return self.beta.size

    @property
    def aic(self) -> float:
        return aic(self)

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + np.log(self.n_obs) * self.n_params

    def ci(self, level: float = 0.95) -> dict[str, tuple[float, float, str]]:
        z = stats.norm.ppf(0.5 + level / 2)
        return {nm: (b - z * s, b + z * s, "wald") for nm, b, s in zip(self.names, self.beta, self.se)}


def fit_logistic(y, X, names: Sequence[str] | None = None, max_iter: int = 100, tol: float = 1e-10) -> FixedFit:
    """Newton-Raphson (IRLS) fit of a logistic regression.

    Convergence means ``max |gradient| < tol`` or a full Newton step with
    every component below ``tol``; the latter leaves an error of order
    ``tol**2`` in the coefficients.  Coefficients whose norm
    passes 1e3, or fitted probabilities that are all numerically 0 or 1,
    flag separation and leave ``converged`` false.
    """
    y, X = _check_design(y, X)
    n, q = X.shape
    names = tuple(names) if names is not None else tuple(f"b{j}" for j in range(q))
    if np.linalg.matrix_rank(X) < q:
        raise InvalidInputError("design matrix is not of full column rank")
    beta = np.zeros(q)
    ll = logistic_loglik(beta, y, X)
    converged, message, it = False, "iteration limit reached", 0
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        g = X.T @ (y - p)
        if np.max(np.abs(g)) < tol:
            converged, message = True, "gradient below tolerance"
            break
        H = (X * (p * (1 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            ll_new = logistic_loglik(cand, y, X)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if t == 1.0 and np.max(np.abs(step)) < tol:
            converged, message = True, "Newton step below tolerance"
            break
        if np.linalg.norm(beta) > 1e3:
            message = "coefficient norm exceeded 1e3 (separation)"
            break
    p = expit(X @ beta)
    if converged and np.all(np.abs(y - p) < 1e-6):
        converged, message = False, "fitted probabilities numerically 0 or 1 (complete separation)"
    H = (X * (p * (1 - p))[:, None]).T @ X
    vcov = _invert_information(H)
    se = np.sqrt(np.clip(np.diag(vcov), 0, None))
    return FixedFit(names, beta, se, float(ll), converged, vcov, n, it, message)


def _invert_information(info: np.ndarray) -> np.ndarray:
    info = 0.5 * (info + info.T)
    try:
        np.linalg.cholesky(info)
        return np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(info)


@dataclass(frozen=True)
class ClusteredDesign:
    """Clusters padded to a common length for vectorized evaluation.

    ``X`` has shape ``(m, n_max, q)`` and includes the intercept column;
    padded cells carry ``mask == 0``.
    """

    cluster_ids: tuple[str, ...]
    names: tuple[str, ...]
    y: np.ndarray
    X: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_clusters(cls, clusters: Sequence, names: Sequence[str] | None = None) -> "ClusteredDesign":
        """Build from objects exposing ``cluster_id``, ``y`` and ``X`` (no intercept)."""
        if len(clusters) == 0:
            raise InvalidInputError("no clusters supplied")
        ys, Xs, ids = [], [], []
        for c in clusters:
            y, X = _check_design(c.y, c.X)
            ys.append(y)
            Xs.append(np.column_stack([np.ones(y.size), X]))
            ids.append(str(c.cluster_id))
        q = Xs[0].shape[1]
        if any(X.shape[1] != q for X in Xs):
            raise InvalidInputError("clusters disagree on the number of predictors")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate cluster ids")
        m, n_max = len(ys), max(y.size for y in ys)
        Y = np.zeros((m, n_max))
        XX = np.zeros((m, n_max, q))
        M = np.zeros((m, n_max))
        for i, (y, X) in enumerate(zip(ys, Xs)):
            Y[i, : y.size] = y
            XX[i, : y.size] = X
            M[i, : y.size] = 1.0
        if names is None:
            names = (INTERCEPT,) + tuple(f"x{j}" for j in range(1, q))
        else:
            names = (INTERCEPT,) + tuple(names)
            if len(names) != q:
                raise InvalidInputError(f"{len(names) - 1} predictor names for {q - 1} columns")
        return cls(tuple(ids), tuple(names), Y, XX, M)

    @property
    def n_clusters(self) -> int:
        return self.y.shape[0]

    @property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        keep = self.mask.ravel() > 0
        return self.y.ravel()[keep], self.X.reshape(-1, self.X.shape[2])[keep]


def _conditional_loglik(y, mask, eta):
    """Per-cluster ``log g(y | eta)``; ``eta`` is broadcast over trailing node axes."""
    if eta.ndim == 3:
        return np.einsum("mn,mnk->mk", mask, y[:, :, None] * eta - _log1pexp(eta))
    return np.sum(mask * (y * eta - _log1pexp(eta)), axis=1)


def conditional_modes(eta: np.ndarray, y: np.ndarray, mask: np.ndarray, sigma: float,
                      tol: float = 1e-10, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Mode of each cluster's random-intercept posterior and the curvature there.

    Safeguarded Newton on the concave log posterior.  Returns ``(u_hat, info)``
    with ``info`` the negative second derivative at ``u_hat``.
    """
    inv_var = 1.0 / sigma ** 2
    u = np.zeros(eta.shape[0])

    def objective(v):
        return _conditional_loglik(y, mask, eta + v[:, None]) - 0.5 * inv_var * v ** 2

    h = objective(u)
    for _ in range(max_iter):
        p = expit(eta + u[:, None])
        score = np.sum(mask * (y - p), axis=1) - inv_var * u
        info = np.sum(mask * p * (1 - p), axis=1) + inv_var
        step = score / info
        t = np.ones_like(u)
        for _ in range(30):
            cand = u + t * step
            h_new = objective(cand)
            bad = h_new < h - 1e-12 * np.abs(h)
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        u, h = cand, h_new
        if np.max(np.abs(t * step)) < tol:
            break
    p = expit(eta + u[:, None])
    info = np.sum(mask * p * (1 - p), axis=1) + inv_var
    return u, info


@dataclass(frozen=True)
class MarginalTerms:
    per_cluster: np.ndarray
    gradient: np.ndarray
    modes: np.ndarray

    @property
    def total(self) -> float:
        return float(self.per_cluster.sum())


def marginal_terms(beta, sigma_u: float, design: ClusteredDesign, rule: QuadratureRule,
                   adaptive: bool = True) -> MarginalTerms:
    """Per-cluster marginal log-likelihoods and the gradient in ``(beta, log sigma_u)``.

    The gradient is exact for the quadrature formula itself, including the
    movement of the adaptive nodes with the parameters.
    """
    beta = np.asarray(beta, dtype=float)
    if not sigma_u >= 0:
        raise InvalidInputError(f"sigma_u must be non-negative, got {sigma_u}")
    y, X, mask = design.y, design.X, design.mask
    eta = X @ beta
    if sigma_u == 0:
        p = expit(eta)
        grad = np.append(np.einsum("mn,mnq->q", mask * (y - p), X), 0.0)
        return MarginalTerms(_conditional_loglik(y, mask, eta), grad, np.zeros(design.n_clusters))

    z, w = rule.nodes, rule.weights
    inv_var = 1.0 / sigma_u ** 2
    if adaptive:
        u_hat, info = conditional_modes(eta, y, mask, sigma_u)
        s = 1.0 / np.sqrt(info)
        u = u_hat[:, None] + s[:, None] * z[None, :]
        log_prior = -0.5 * inv_var * u ** 2 - np.log(sigma_u) - _HALF_LOG_2PI
        log_ref = -0.5 * z ** 2 - _HALF_LOG_2PI
        terms = np.log(w) + _conditional_loglik(y, mask, eta[:, :, None] + u[:, None, :]) + log_prior - log_ref
        per_cluster = np.log(s) + logsumexp(terms, axis=1)
    else:
        u_hat = np.zeros(design.n_clusters)
        u = np.broadcast_to(sigma_u * z, (design.n_clusters, z.size))
        terms = np.log(w) + _conditional_loglik(y, mask, eta[:, :, None] + u[:, None, :])
        per_cluster = logsumexp(terms, axis=1)

    omega = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))
    resid = mask[:, :, None] * (y[:, :, None] - expit(eta[:, :, None] + u[:, None, :]))
    score_beta = np.einsum("mk,mnk,mnq->mq", omega, resid, X)
    if not adaptive:
        g_sigma = float(np.einsum("mk,mnk,mk->", omega, resid, u))
        return MarginalTerms(per_cluster, np.append(score_beta.sum(axis=0), g_sigma), u_hat)

    # d(node placement)/d(theta) through the mode and the curvature
    p0 = expit(eta + u_hat[:, None])
    v0 = mask * p0 * (1 - p0)
    c0 = v0 * (1 - 2 * p0)
    du_db = -np.einsum("mn,mnq->mq", v0, X) / info[:, None]
    du_ds = 2.0 * inv_var * u_hat / info
    c_sum = c0.sum(axis=1)
    dinfo_db = np.einsum("mn,mnq->mq", c0, X) + c_sum[:, None] * du_db
    dinfo_ds = c_sum * du_ds - 2.0 * inv_var
    dlogs_db = -0.5 * dinfo_db / info[:, None]
    dlogs_ds = -0.5 * dinfo_ds / info
    slope = resid.sum(axis=1) - inv_var * u  # d/du of the log joint at each node
    w_slope = omega * slope
    w_slope_z = w_slope @ z
    g_beta = (dlogs_db + score_beta + w_slope.sum(axis=1)[:, None] * du_db
              + (w_slope_z * s)[:, None] * dlogs_db)
    g_sigma = (dlogs_ds + np.sum(omega * (inv_var * u ** 2 - 1.0), axis=1)
               + w_slope.sum(axis=1) * du_ds + w_slope_z * s * dlogs_ds)
    return MarginalTerms(per_cluster, np.append(g_beta.sum(axis=0), g_sigma.sum()), u_hat)


def cluster_marginal_loglik(beta, sigma_u: float, cluster, rule: QuadratureRule | int = 7,
                            adaptive: bool = True) -> float:
    """Marginal log-likelihood of one cluster (``cluster.X`` without intercept)."""
    if isinstance(rule, (int, np.integer)):
        if rule < 1:
            raise ConfigurationError("quadrature needs at least one point")
        rule = gauss_hermite_rule(int(rule))
    design = ClusteredDesign.from_clusters([cluster])
    return marginal_terms(beta, sigma_u, design, rule, adaptive).total


def marginal_loglik(beta, sigma_u: float, design: ClusteredDesign, rule: QuadratureRule,
                    adaptive: bool = True) -> float:
    return marginal_terms(beta, sigma_u, design, rule, adaptive).total


@dataclass(frozen=True)
class GlmmFit:
    names: tuple[str, ...]
    beta: np.ndarray
    sigma_u: float
    se_beta: np.ndarray
    se_log_sigma: float
    loglik: float
    n_quad: int
    adaptive: bool
    converged: bool
    theta: np.ndarray
    vcov: np.ndarray
    n_obs: int
    n_clusters: int
    modes: np.ndarray
    ci: dict = field(default_factory=dict)
    boundary: bool = False
    message: str = ""

    @property
    def n_params(self) -> int:
        return self.beta.size + 1

    @property
    def aic(self) -> float:
        return aic(self)

    @property
    def bic(self) -> float:
        # sample-size term uses total observations
        return -2.0 * self.loglik + np.log(self.n_obs) * self.n_params

    @property
    def se_sigma(self) -> float:
        return self.sigma_u * self.se_log_sigma

    def with_ci(self, ci: dict) -> "GlmmFit":
        merged = dict(self.ci)
        merged.update(ci)
        return dataclasses.replace(self, ci=merged)


def aic(fit) -> float:
    """``-2 loglik + 2 K`` with ``K`` the number of estimated parameters."""
    return -2.0 * fit.loglik + 2.0 * fit.n_params


def wald_intervals(names, beta, se_beta, log_sigma, se_log_sigma, level=0.95) -> dict:
    z = stats.norm.ppf(0.5 + level / 2)
    out = {nm: (float(b - z * s), float(b + z * s), "wald") for nm, b, s in zip(names, beta, se_beta)}
    with np.errstate(over="ignore"):
        # a flat likelihood near the boundary can give an unbounded upper limit
        out[SIGMA] = (float(np.exp(log_sigma - z * se_log_sigma)), float(np.exp(log_sigma + z * se_log_sigma)), "wald")
    return out


class _Objective:
    """Marginal log-likelihood in ``theta = (beta, log sigma_u)`` with caching."""

    def __init__(self, design: ClusteredDesign, rule: QuadratureRule, adaptive: bool):
        self.design, self.rule, self.adaptive = design, rule, adaptive
        self._key = None
        self._val = None

    def terms(self, theta) -> MarginalTerms:
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key != self._key:
            sigma = float(np.exp(theta[-1])) if theta[-1] > -700 else 0.0
            with np.errstate(over="ignore"):
                self._val = marginal_terms(theta[:-1], sigma, self.design, self.rule, self.adaptive)
            self._key = key
        return self._val

    def value(self, theta) -> float:
        return self.terms(theta).total

    def grad(self, theta) -> np.ndarray:
        return self.terms(theta).gradient


def fit_glmm(clusters, n_quad: int = 7, adaptive: bool = True, names: Sequence[str] | None = None,
             ci: str = "wald", level: float = 0.95, opts: MaxOptions | None = None) -> GlmmFit:
    """Random-intercept logistic regression by (adaptive) Gauss-Hermite quadrature.

    ``clusters`` is a :class:`ClusteredDesign` or a sequence of objects with
    ``cluster_id``, ``y`` and ``X``.  ``n_quad=1`` gives the Laplace
    approximation.  Starts from the pooled fixed-effects fit with
    ``sigma_u = 1``.
    """
    design = clusters if isinstance(clusters, ClusteredDesign) else ClusteredDesign.from_clusters(clusters, names)
    if design.n_clusters < 2:
        raise InvalidInputError("a random-intercept model needs at least two clusters")
    if ci not in ("wald", "profile"):
        raise ConfigurationError(f"unknown interval method {ci!r}")
    rule = gauss_hermite_rule(n_quad)
    y, X = design.pooled()
    start = fit_logistic(y, X, design.names)
    theta0 = np.append(start.beta, 0.0)
    obj = _Objective(design, rule, adaptive)
    res = maximize_loglik(obj.value, obj.grad, theta0, opts or MaxOptions(gtol=1e-5))
    theta = res.x
    vcov = _invert_information(res.neg_hessian)
    se = np.sqrt(np.clip(np.diag(vcov), 0, None))
    boundary = bool(theta[-1] < LOG_SIGMA_BOUNDARY)
    sigma = 0.0 if boundary else float(np.exp(theta[-1]))
    q = design.X.shape[2]
    fit = GlmmFit(
        names=design.names, beta=theta[:q].copy(), sigma_u=sigma, se_beta=se[:q], se_log_sigma=float(se[-1]),
        loglik=res.value, n_quad=n_quad, adaptive=adaptive, converged=res.converged, theta=theta, vcov=vcov,
        n_obs=design.n_obs, n_clusters=design.n_clusters, modes=obj.terms(theta).modes,
        boundary=boundary, message=res.message,
    )
    fit = fit.with_ci(wald_intervals(fit.names, fit.beta, fit.se_beta, theta[-1], fit.se_log_sigma, level))
    if not res.converged:
        log.warning("random-intercept fit did not converge: %s", res.message)
    if ci == "profile":
        intervals = {nm: profile_ci(fit, design, nm, level) for nm in fit.names + (SIGMA,)}
        fit = fit.with_ci(intervals)
    return fit


def profile_interval(f, grad, theta_hat, index: int, se: float, level: float = 0.95,
                     lower_limit: float = -np.inf, opts: MaxOptions | None = None) -> tuple[float, float, str]:
    """Likelihood-ratio interval for ``theta[index]`` with the rest re-optimized.

    Each endpoint solves ``2 * (f_hat - profile(t)) = chi2_1(level)`` by
    bracketing outward from the estimate then root finding.  An endpoint that
    runs into ``lower_limit`` without crossing is set to ``lower_limit``.
    Any failure returns the Wald interval tagged ``"wald"``.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    f_hat = float(f(theta_hat))
    drop = 0.5 * stats.chi2.ppf(level, 1)
    z = stats.norm.ppf(0.5 + level / 2)
    wald = (float(theta_hat[index] - z * se), float(theta_hat[index] + z * se), "wald")
    if not (np.isfinite(se) and se > 0):
        return wald
    others = [k for k in range(theta_hat.size) if k != index]
    opts = opts or MaxOptions(gtol=1e-6)
    warm = {"x": theta_hat[others]}

    def full(t, rest):
        th = np.empty_like(theta_hat)
        th[index] = t
        th[others] = rest
        return th

    def profile(t):
        if not others:
            return float(f(full(t, [])))
        res = maximize_loglik(lambda r: f(full(t, r)), lambda r: np.asarray(grad(full(t, r)))[others],
                              warm["x"], opts)
        warm["x"] = res.x
        if res.value > f_hat + 1e-3:
            raise _ProfileFailure("profile exceeds the fitted maximum; initial fit is not the optimum")
        return res.value

    def gap(t):
        return f_hat - profile(t) - drop

    ends = []
    try:
        for side in (-1.0, 1.0):
            warm["x"] = theta_hat[others]
            inside, t = float(theta_hat[index]), float(theta_hat[index])
            step = side * z * se
            crossed = False
            for _ in range(12):
                t = inside + step
                if side < 0 and t <= lower_limit:
                    t = lower_limit
                if gap(t) > 0:
                    crossed = True
                    break
                if t == lower_limit:
                    break
                inside, step = t, step * 2.0
            if not crossed:
                if side < 0 and t == lower_limit:
                    ends.append(lower_limit)
                    continue
                raise _ProfileFailure("could not bracket the interval endpoint")
            warm["x"] = theta_hat[others]
            root = optimize.brentq(gap, min(inside, t), max(inside, t), xtol=1e-6 * se, rtol=1e-10)
            ends.append(float(root))
    except (_ProfileFailure, ValueError, np.linalg.LinAlgError, ArithmeticError) as exc:
        log.warning("profile interval for parameter %d fell back to Wald: %s", index, exc)
        return wald
    return ends[0], ends[1], "profile"


class _ProfileFailure(RuntimeError):
    pass


def profile_ci(fit: GlmmFit, clusters, param: str, level: float = 0.95) -> tuple[float, float, str]:
    """Profile-likelihood interval for a coefficient name or ``"sigma_u"``."""
    design = clusters if isinstance(clusters, ClusteredDesign) else ClusteredDesign.from_clusters(clusters)
    names = fit.names + (SIGMA,)
    if param not in names:
        raise InvalidInputError(f"unknown parameter {param!r}; expected one of {names}")
    index = names.index(param)
    z = stats.norm.ppf(0.5 + level / 2)
    obj = _Objective(design, gauss_hermite_rule(fit.n_quad), fit.adaptive)
    if not fit.converged:
        lo, hi, _ = fit.ci.get(param, (np.nan, np.nan, "wald"))
        return lo, hi, "wald"
    se = fit.se_log_sigma if param == SIGMA else fit.se_beta[index]
    lo, hi, method = profile_interval(obj.value, obj.grad, fit.theta, index, se, level,
                                      lower_limit=LOG_SIGMA_BOUNDARY if param == SIGMA else -np.inf)
    if param == SIGMA:
        if method == "wald":
            return float(np.exp(fit.theta[-1] - z * se)), float(np.exp(fit.theta[-1] + z * se)), "wald"
        lo = 0.0 if lo <= LOG_SIGMA_BOUNDARY else float(np.exp(lo))
        return lo, float(np.exp(hi)), method
    return float(lo), float(hi), method


def scaled_residuals(fit, clusters) -> np.ndarray:
    """Pearson residuals; random-intercept fits use the conditional modes."""
    if isinstance(fit, FixedFit):
        y, X = clusters
        p = expit(np.asarray(X) @ fit.beta)
        return (np.asarray(y) - p) / np.sqrt(p * (1 - p))
    design = clusters if isinstance(clusters, ClusteredDesign) else ClusteredDesign.from_clusters(clusters)
    eta = design.X @ fit.beta + fit.modes[:, None]
    p = expit(eta)
    r = (design.y - p) / np.sqrt(p * (1 - p))
    return r[design.mask > 0]


def five_number_summary(values) -> tuple[float, float, float, float, float]:
    v = np.asarray(values, dtype=float)
    return tuple(float(q) for q in np.percentile(v, [0, 25, 50, 75, 100]))
