import numpy as np
import pytest
from scipy import integrate

from conftest import make_cluster
from pseudoglmm.errors import ConfigurationError, InvalidInputError
from pseudoglmm.glmm import (
    INTERCEPT,
    SIGMA,
    ClusteredDesign,
    FixedFit,
    aic,
    cluster_marginal_loglik,
    fit_glmm,
    fit_logistic,
    five_number_summary,
    logistic_grad,
    logistic_loglik,
    marginal_loglik,
    marginal_terms,
    profile_ci,
    profile_interval,
    scaled_residuals,
)
from pseudoglmm.moments import ClusterData
from pseudoglmm.optim import QuadratureRule, check_gradient, gauss_hermite_rule


def dense_rule(k=201):
    """Non-adaptive probabilists' Hermite rule with more points than the library allows."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(k)
    return QuadratureRule(nodes, weights / weights.sum())


def integral_oracle(beta, sigma, cluster):
    """log of the marginal likelihood by adaptive scalar integration (scipy quad)."""
    eta = beta[0] + cluster.X @ beta[1:]
    y = cluster.y

    def log_integrand(u):
        return np.sum(y * (eta + u) - np.logaddexp(0, eta + u)) - 0.5 * (u / sigma) ** 2

    grid = np.linspace(-12 * sigma, 12 * sigma, 2001)
    peak = max(log_integrand(u) for u in grid)
    val, _ = integrate.quad(lambda u: np.exp(log_integrand(u) - peak), -12 * sigma, 12 * sigma,
                            epsabs=0, epsrel=1e-13, limit=400)
    return np.log(val) + peak - np.log(sigma * np.sqrt(2 * np.pi))


def simulated_clusters(rng, m, n, beta, sigma):
    out = []
    for i in range(m):
        out.append(make_cluster(rng, n, p=len(beta) - 1, cluster_id=f"c{i}", beta=beta, u=rng.normal() * sigma))
    return out


class TestLogisticLikelihood:
    def test_beta_zero(self, rng):
        X = np.column_stack([np.ones(9), rng.normal(size=9)])
        y = (rng.random(9) < 0.5).astype(float)
        assert logistic_loglik([0, 0], y, X) == pytest.approx(-9 * np.log(2), abs=1e-12)
        np.testing.assert_allclose(logistic_grad([0, 0], y, X), X.T @ (y - 0.5), atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_check(self, seed):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(30), rng.normal(size=(30, 3))])
        y = (rng.random(30) < 0.4).astype(float)
        beta = rng.normal(size=4)
        err = check_gradient(lambda b: logistic_loglik(b, y, X), lambda b: logistic_grad(b, y, X), beta)
        assert err < 1e-6


class TestFitLogistic:
    def test_intercept_only(self):
        y = np.r_[np.ones(7), np.zeros(3)]
        fit = fit_logistic(y, np.ones((10, 1)))
        assert fit.converged
        assert fit.beta[0] == pytest.approx(np.log(0.7 / 0.3), abs=1e-10)

    def test_two_by_two_log_odds_ratio(self):
        x = np.r_[np.ones(30), np.zeros(30)]
        y = np.r_[np.ones(20), np.zeros(10), np.ones(10), np.zeros(20)]
        fit = fit_logistic(y, np.column_stack([np.ones(60), x]))
        assert fit.beta[1] == pytest.approx(np.log(4), abs=1e-8)
        # closed-form standard error of a log odds ratio
        assert fit.se[1] == pytest.approx(np.sqrt(1 / 20 + 1 / 10 + 1 / 10 + 1 / 20), rel=1e-8)

    def test_separation(self):
        x = np.arange(10, dtype=float)
        y = (x > 4.5).astype(float)
        fit = fit_logistic(y, np.column_stack([np.ones(10), x]))
        assert not fit.converged

    def test_rank_deficient(self):
        X = np.column_stack([np.ones(5), np.ones(5)])
        with pytest.raises(InvalidInputError):
            fit_logistic([0, 1, 0, 1, 1], X)

    def test_scale_equivariance(self, rng):
        X = np.column_stack([np.ones(200), rng.normal(size=(200, 2))])
        y = (rng.random(200) < 1 / (1 + np.exp(-(X @ [0.2, 0.7, -0.4])))).astype(float)
        a = fit_logistic(y, X)
        X2 = X.copy()
        X2[:, 1] *= 3.0
        b = fit_logistic(y, X2)
        assert b.beta[1] == pytest.approx(a.beta[1] / 3, abs=1e-8)
        assert b.loglik == pytest.approx(a.loglik, abs=1e-8)

    def test_aic_bic(self):
        fit = FixedFit(("a",) * 8, np.zeros(8), np.ones(8), -1000.0, True, np.eye(8), 100, 1)
        assert fit.aic == 2016.0 == aic(fit)
        assert fit.bic == pytest.approx(2000 + 8 * np.log(100))

    def test_wald_interval_brackets(self, rng):
        X = np.column_stack([np.ones(80), rng.normal(size=80)])
        y = (rng.random(80) < 0.5).astype(float)
        fit = fit_logistic(y, X, names=["a", "b"])
        for (lo, hi, method), b in zip(fit.ci().values(), fit.beta):
            assert lo < b < hi and method == "wald"


class TestClusterMarginalLoglik:
    def test_sigma_zero_single_obs(self):
        c = ClusterData("c", [1.0], [[0.3]])
        assert cluster_marginal_loglik([0.0, 0.0], 0.0, c) == pytest.approx(np.log(0.5), abs=1e-15)

    def test_sigma_zero_equals_fixed_effects(self, rng):
        clusters = [make_cluster(rng, int(rng.integers(1, 30)), p=2, cluster_id=f"c{i}") for i in range(8)]
        design = ClusteredDesign.from_clusters(clusters)
        y, X = design.pooled()
        for _ in range(5):
            beta = rng.normal(size=3)
            total = sum(cluster_marginal_loglik(beta, 0.0, c) for c in clusters)
            assert total == pytest.approx(logistic_loglik(beta, y, X), abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_dense_grid_matches_scalar_integration(self, seed):
        rng = np.random.default_rng(seed)
        c = make_cluster(rng, 20, p=2, beta=[-0.5, 0.4, -0.3], u=rng.normal())
        beta, sigma = np.array([-0.5, 0.4, -0.3]), 1.0
        dense = cluster_marginal_loglik(beta, sigma, c, dense_rule(), adaptive=False)
        assert dense == pytest.approx(integral_oracle(beta, sigma, c), abs=1e-10)

    @pytest.mark.parametrize("seed", range(4))
    def test_adaptive_high_order_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        c = make_cluster(rng, 40, p=2, beta=[0.3, 1.0, -1.0], u=rng.normal() * 2)
        beta, sigma = np.array([0.3, 1.0, -1.0]), 2.0
        assert cluster_marginal_loglik(beta, sigma, c, 25) == pytest.approx(
            integral_oracle(beta, sigma, c), abs=1e-9)

    @pytest.mark.xfail(strict=True, reason="five adaptive nodes reach about 1e-4 on this cluster; "
                                             "about 15 are needed for 1e-6 (see the decisions ledger)")
    def test_adaptive_five_versus_dense_grid(self):
        rng = np.random.default_rng(0)
        beta = np.array([-0.5, 0.4, -0.3])
        c = make_cluster(rng, 20, p=2, beta=beta, u=rng.normal())
        adaptive = cluster_marginal_loglik(beta, 1.0, c, 5)
        dense = cluster_marginal_loglik(beta, 1.0, c, dense_rule(), adaptive=False)
        assert abs(adaptive - dense) < 1e-6

    def test_convergence_in_number_of_nodes(self):
        rng = np.random.default_rng(5)
        beta = np.array([-0.5, 0.4, -0.3])
        c = make_cluster(rng, 20, p=2, beta=beta, u=rng.normal())
        ll = {k: cluster_marginal_loglik(beta, 1.0, c, k) for k in range(5, 26)}
        gaps = [abs(ll[k] - ll[k + 10]) for k in range(5, 16)]
        assert all(b <= a for a, b in zip(gaps, gaps[1:]))

    def test_laplace_is_one_node(self, rng):
        c = make_cluster(rng, 15, p=1, beta=[0, 1])
        lap = cluster_marginal_loglik([0, 1], 0.8, c, 1)
        assert np.isfinite(lap)
        assert abs(lap - integral_oracle(np.array([0.0, 1.0]), 0.8, c)) < 0.05

    def test_errors(self, rng):
        c = make_cluster(rng, 5, p=1)
        with pytest.raises(InvalidInputError):
            cluster_marginal_loglik([0, 0], -1.0, c)
        with pytest.raises(ConfigurationError):
            cluster_marginal_loglik([0, 0], 1.0, c, 0)

    def test_permutation_and_relabeling_invariance(self, rng):
        clusters = simulated_clusters(rng, 6, 12, [-0.3, 0.5], 1.0)
        rule = gauss_hermite_rule(7)
        base = marginal_loglik([-0.3, 0.5], 1.1, ClusteredDesign.from_clusters(clusters), rule)
        shuffled = []
        for i, c in enumerate(reversed(clusters)):
            perm = rng.permutation(c.n)
            shuffled.append(ClusterData(f"z{i}", c.y[perm], c.X[perm]))
        other = marginal_loglik([-0.3, 0.5], 1.1, ClusteredDesign.from_clusters(shuffled), rule)
        assert other == pytest.approx(base, abs=1e-12)

    @pytest.mark.parametrize("adaptive", [True, False])
    def test_gradient_matches_central_differences(self, adaptive):
        rng = np.random.default_rng(8)
        clusters = simulated_clusters(rng, 8, 15, [-0.5, 0.8, -0.4], 1.2)
        design = ClusteredDesign.from_clusters(clusters)
        rule = gauss_hermite_rule(7)
        for _ in range(4):
            theta = np.r_[rng.normal(size=3) * 0.5, rng.uniform(-1, 1)]

            def f(t):
                return marginal_terms(t[:-1], np.exp(t[-1]), design, rule, adaptive).total

            def g(t):
                return marginal_terms(t[:-1], np.exp(t[-1]), design, rule, adaptive).gradient

            assert check_gradient(f, g, theta) < 1e-5


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(2024)
    return simulated_clusters(rng, 30, 40, [-1.0, 0.6, -0.4], 1.0)


@pytest.fixture(scope="module")
def fit(data):
    return fit_glmm(data)


class TestFitGlmm:
    def test_recovers_parameters(self, fit):
        assert fit.converged
        assert fit.names[0] == INTERCEPT
        np.testing.assert_allclose(fit.beta, [-1.0, 0.6, -0.4], atol=4 * fit.se_beta.max())
        assert 0.4 < fit.sigma_u < 1.8
        assert fit.n_obs == 1200 and fit.n_clusters == 30

    def test_aic_counts_sigma(self, fit):
        assert fit.n_params == 4
        assert fit.aic == pytest.approx(-2 * fit.loglik + 8)
        assert fit.bic == pytest.approx(-2 * fit.loglik + 4 * np.log(1200))

    def test_scale_equivariance(self, data, fit):
        scaled = [ClusterData(c.cluster_id, c.y, c.X * [2.0, 1.0]) for c in data]
        other = fit_glmm(scaled)
        assert other.beta[1] == pytest.approx(fit.beta[1] / 2, abs=1e-5)
        assert other.beta[2] == pytest.approx(fit.beta[2], abs=1e-5)
        assert other.loglik == pytest.approx(fit.loglik, abs=1e-6)

    def test_null_random_effect(self):
        rng = np.random.default_rng(3)
        clusters = simulated_clusters(rng, 30, 30, [-0.5, 0.5], 0.0)
        fit = fit_glmm(clusters)
        assert fit.sigma_u < 0.3

    def test_nagq_recorded(self, data):
        lap = fit_glmm(data[:10], n_quad=1)
        assert lap.n_quad == 1 and np.isfinite(lap.aic)

    def test_wald_intervals_bracket(self, fit):
        for name in fit.names + (SIGMA,):
            lo, hi, method = fit.ci[name]
            est = fit.sigma_u if name == SIGMA else fit.beta[fit.names.index(name)]
            assert lo < est < hi and method == "wald"

    def test_profile_interval_brackets_and_is_near_wald(self, data, fit):
        for name in (INTERCEPT, "x1", SIGMA):
            lo, hi, method = profile_ci(fit, data, name)
            est = fit.sigma_u if name == SIGMA else fit.beta[fit.names.index(name)]
            assert method == "profile"
            assert lo < est < hi
        lo, hi, _ = profile_ci(fit, data, "x1")
        wlo, whi, _ = fit.ci["x1"]
        assert abs((hi - lo) - (whi - wlo)) < 0.05 * (whi - wlo)

    def test_unknown_parameter(self, data, fit):
        with pytest.raises(InvalidInputError):
            profile_ci(fit, data, "nope")

    def test_needs_two_clusters(self, data):
        with pytest.raises(InvalidInputError):
            fit_glmm(data[:1])

    def test_scaled_residuals(self, data, fit):
        r = scaled_residuals(fit, data)
        assert r.size == 1200
        lo, q1, med, q3, hi = five_number_summary(r)
        assert lo <= q1 <= med <= q3 <= hi


def test_profile_equals_wald_for_quadratic():
    A = np.array([[4.0, 1.0], [1.0, 2.0]])
    mu = np.array([0.5, -1.0])

    def f(t):
        d = t - mu
        return -0.5 * d @ A @ d

    def g(t):
        return -A @ (t - mu)

    se = np.sqrt(np.linalg.inv(A)[0, 0])
    lo, hi, method = profile_interval(f, g, mu, 0, se)
    assert method == "profile"
    assert lo == pytest.approx(mu[0] - 1.959963984540054 * se, rel=1e-6)
    assert hi == pytest.approx(mu[0] + 1.959963984540054 * se, rel=1e-6)


def test_adding_useless_parameter_adds_two_to_aic():
    base = FixedFit(("a",), np.zeros(1), np.ones(1), -50.0, True, np.eye(1), 10, 1)
    more = FixedFit(("a", "b"), np.zeros(2), np.ones(2), -50.0, True, np.eye(2), 10, 1)
    assert more.aic - base.aic == 2.0
