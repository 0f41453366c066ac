import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial.hermite import hermgauss

from unite import autodiff as ad
from unite.autodiff import Graph, check_gradient
from unite.kernel import kernel_matrix
from unite.svgp import (
    VariationalState,
    bernoulli_log_lik,
    conditional_f_given_u,
    conditional_moments,
    draw_q_u,
    elbo,
    elbo_estimate,
    kl_divergence,
)


def log_evidence_quadrature(V, y, lengthscales, n_nodes=40):
    """``log p(y)`` under the exact GP prior by tensor-product Gauss-Hermite."""
    N = len(y)
    K = kernel_matrix(V, V, lengthscales) + 1e-10 * np.eye(N)
    L = np.linalg.cholesky(K)
    x, w = hermgauss(n_nodes)
    grid = np.array(list(itertools.product(x, repeat=N)))  # G x N
    weights = np.prod(np.array(list(itertools.product(w, repeat=N))), axis=1)
    f = math.sqrt(2.0) * grid @ L.T
    ll = (y * -np.logaddexp(0, -f) + (1 - y) * -np.logaddexp(0, f)).sum(axis=1)
    return float(np.log(np.sum(weights * np.exp(ll))) - 0.5 * N * math.log(math.pi))


def random_problem(rng, N, M=3, D=2):
    V = rng.normal(size=(N, D))
    y = rng.integers(0, 2, size=N).astype(float)
    state = VariationalState(rng.normal(size=(M, D)), rng.normal(scale=0.7, size=D), float(rng.uniform(-2, 0.5)))
    lengthscales = rng.uniform(0.5, 2.0, size=D)
    return V, y, state, lengthscales


class TestConditional:
    def test_interpolation_at_inducing_points(self):
        Z = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.5], [3.0, 3.0]])
        u = np.array([0.3, -1.2, 0.8, 2.0])
        cond = conditional_f_given_u(Z, u, Z, [1.0, 1.0], full_cov=True)
        np.testing.assert_allclose(cond.mean, u, atol=1e-5)
        assert np.abs(cond.covariance).max() <= 1e-6 * 1.01 + 1e-12

    @pytest.mark.parametrize("dist", [0.0, 0.5, 1.0, 2.0])
    def test_single_pair(self, dist):
        c = math.exp(-0.5 * dist**2)
        cond = conditional_f_given_u([[dist]], [1.7], [[0.0]], [1.0], jitter=0.0)
        assert cond.mean[0] == pytest.approx(c * 1.7, abs=1e-12)
        assert cond.variance[0] == pytest.approx(1 - c * c, abs=1e-12)

    def test_prior_recovered_far_away(self):
        Z = np.array([[0.0, 0.0], [1.0, 0.0]])
        V = np.array([[40.0, 40.0], [-50.0, 30.0]])
        assert kernel_matrix(V, Z, [1.0, 1.0]).max() < 1e-12
        cond = conditional_f_given_u(V, [1.0, -2.0], Z, [1.0, 1.0])
        np.testing.assert_allclose(cond.mean, 0.0, atol=1e-10)
        np.testing.assert_allclose(cond.variance, 1.0, atol=1e-10)

    def test_duplicate_inducing_rows_recovered(self):
        # rank-one K_ZZ is rescued by jitter escalation
        cond = conditional_f_given_u(np.ones((1, 2)), np.ones(3), np.zeros((3, 2)), [1.0, 1.0], jitter=1e-12)
        assert np.isfinite(cond.mean).all() and 0.0 <= cond.variance[0] <= 1.0

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_variance_bounds(self, seed):
        rng = np.random.default_rng(seed)
        M, N, D = int(rng.integers(1, 8)), int(rng.integers(1, 10)), int(rng.integers(1, 4))
        Z, V = rng.normal(size=(M, D)), rng.normal(size=(N, D))
        if rng.random() < 0.5:
            V[: min(M, N)] = Z[: min(M, N)]
        _, raw = conditional_moments(V, np.zeros(M), Z, np.zeros(D), clamp=False)
        assert raw.data.min() >= -1e-8 and raw.data.max() <= 1 + 1e-8
        var = conditional_f_given_u(V, np.zeros(M), Z, np.ones(D)).variance
        assert var.min() >= 0.0 and var.max() <= 1.0


class TestSampleQU:
    def test_degenerate_variance(self):
        state = VariationalState([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], [0.5, -0.5], math.log(1e-12))
        u = draw_q_u(state, 20, seed=0)
        np.testing.assert_allclose(u, np.tile(state.mean(), (20, 1)), atol=1e-5)

    def test_sample_mean_clt(self):
        state = VariationalState([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], [0.5, -0.5], math.log(0.7))
        u = draw_q_u(state, 10000, seed=3)
        assert np.all(np.abs(u.mean(axis=0) - state.mean()) < 4 * math.sqrt(0.7 / 10000))

    def test_deterministic(self):
        state = VariationalState(np.eye(2), [1.0, 2.0], 0.0)
        np.testing.assert_array_equal(draw_q_u(state, 5, seed=9), draw_q_u(state, 5, seed=9))

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            draw_q_u(VariationalState(np.eye(2), [1.0, 2.0], 0.0), 0, seed=0)

    def test_free_mean(self):
        state = VariationalState(np.eye(3)[:, :2], [1.0, 2.0, 3.0], math.log(1e-12), free_mean=True)
        np.testing.assert_allclose(draw_q_u(state, 2, seed=0), [[1, 2, 3]] * 2, atol=1e-5)


class TestKL:
    def test_identical(self):
        state = VariationalState(np.eye(3), np.zeros(3), 0.0)
        assert abs(kl_divergence(state, np.eye(3))) < 1e-12

    def test_unit_mean_shift(self):
        assert kl_divergence(VariationalState([[1.0]], [1.0], 0.0), [[1.0]]) == pytest.approx(0.5, abs=1e-12)

    def test_variance_mismatch(self):
        kl = kl_divergence(VariationalState([[1.0]], [0.0], math.log(2.0)), [[1.0]])
        assert kl == pytest.approx(0.5 * (2 - 1 - math.log(2)), abs=1e-12)
        assert kl == pytest.approx(0.15343, abs=1e-5)

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(4, 4))
        K = A @ A.T + 4 * np.eye(4)
        state = VariationalState(rng.normal(size=(4, 2)), rng.normal(size=2), 0.3)
        m, s2 = state.mean(), state.sigma2
        Kinv = np.linalg.inv(K)
        expected = 0.5 * (s2 * np.trace(Kinv) + m @ Kinv @ m - 4 + np.linalg.slogdet(K)[1] - 4 * math.log(s2))
        assert kl_divergence(state, K) == pytest.approx(expected, rel=1e-10)

    def test_factorization_failure(self):
        with pytest.raises(np.linalg.LinAlgError):
            kl_divergence(VariationalState(np.eye(2), [0.0, 0.0], 0.0), [[1.0, 2.0], [2.0, 1.0]])

    @settings(max_examples=300, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        M, D = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        Z = rng.normal(size=(M, D))
        K = kernel_matrix(Z, Z, rng.uniform(0.3, 2, D)) + 1e-3 * np.eye(M)
        state = VariationalState(Z, rng.normal(size=D), float(rng.uniform(-5, 2)))
        assert kl_divergence(state, K) >= -1e-10


class TestBernoulli:
    def test_symmetry_point(self):
        assert float(bernoulli_log_lik(1.0, 0.0).data) == pytest.approx(-0.69315, abs=1e-5)

    def test_confident_correct(self):
        value = float(bernoulli_log_lik(1.0, 50.0).data)
        assert -1e-20 < value <= 0.0

    def test_confident_wrong(self):
        assert float(bernoulli_log_lik(0.0, 50.0).data) == pytest.approx(-50.0, abs=1e-12)
        assert float(bernoulli_log_lik(1.0, -800.0).data) == pytest.approx(-800.0)

    def test_label_flip_symmetry(self):
        f = np.linspace(-20, 20, 41)
        np.testing.assert_allclose(bernoulli_log_lik(np.ones(41), f).data, bernoulli_log_lik(np.zeros(41), -f).data)


class TestElbo:
    def test_terms_consistent(self):
        rng = np.random.default_rng(1)
        V, y, state, l = random_problem(rng, 5)
        est = elbo_estimate(V, y, state, l, B=64, seed=0)
        assert est.value == pytest.approx(est.likelihood_term - est.kl_term)
        assert est.kl_term >= 0 and est.n_samples == 64

    def test_full_batch_scale_is_one(self):
        rng = np.random.default_rng(2)
        V, y, state, l = random_problem(rng, 6)
        a = elbo_estimate(V, y, state, l, B=16, seed=4)
        b = elbo_estimate(V, y, state, l, B=16, seed=4, total_count=6)
        assert a.value == b.value

    def test_minibatch_scaling(self):
        rng = np.random.default_rng(3)
        V, y, state, l = random_problem(rng, 4)
        a = elbo_estimate(V, y, state, l, B=16, seed=4)
        b = elbo_estimate(V, y, state, l, B=16, seed=4, total_count=40)
        assert b.likelihood_term == pytest.approx(10 * a.likelihood_term)
        assert b.kl_term == a.kl_term

    def test_empty_batch(self):
        state = VariationalState(np.eye(2), [0.0, 0.0], 0.0)
        with pytest.raises(ValueError):
            elbo(np.zeros((0, 2)), [], state.Z, state.alpha, 0.0, np.zeros(2), np.zeros((2, 2)), np.zeros((0, 2)))

    def test_toy_bound_over_seeds(self):
        V = np.array([[0.0, 0.3], [0.8, -0.4]])
        y = np.array([1.0, 0.0])
        l = np.array([1.0, 1.5])
        state = VariationalState([[0.1, 0.2], [0.9, -0.3], [-0.5, 0.5]], [0.4, -0.8], math.log(0.3))
        log_p = log_evidence_quadrature(V, y, l)
        for seed in range(5):
            est = elbo_estimate(V, y, state, l, B=2000, seed=seed)
            assert est.value <= log_p + 3 * est.std_error

    def test_bound_on_random_instances(self):
        rng = np.random.default_rng(77)
        for trial in range(24):
            N = 1 + trial % 3
            V, y, state, l = random_problem(rng, N)
            log_p = log_evidence_quadrature(V, y, l, n_nodes=40 if N < 3 else 30)
            est = elbo_estimate(V, y, state, l, B=2000, seed=trial)
            assert est.value <= log_p + 3 * est.std_error, (trial, est, log_p)

    def test_quadrature_oracle_single_point(self):
        # p(y=1) = E[sigmoid(f)] = 0.5 for a symmetric prior
        assert log_evidence_quadrature(np.zeros((1, 1)), np.array([1.0]), [1.0]) == pytest.approx(math.log(0.5), abs=1e-10)

    def test_mc_variance_scaling(self):
        rng = np.random.default_rng(5)
        V, y, state, l = random_problem(rng, 3)
        small = [elbo_estimate(V, y, state, l, B=32, seed=s).value for s in range(50)]
        large = [elbo_estimate(V, y, state, l, B=64, seed=s).value for s in range(50)]
        ratio = np.std(large) / np.std(small)
        assert ratio == pytest.approx(1 / math.sqrt(2), rel=0.3)

    def test_interpolation_limit(self):
        Z = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.5], [4.0, 4.0]])
        alpha = np.array([0.7, -0.4])
        u_star = Z @ alpha
        rng = np.random.default_rng(0)
        eps_u, eps_f = rng.normal(size=(3, 4)), rng.normal(size=(4, 3))
        U = ad.as_tensor(u_star) + math.sqrt(1e-12) * eps_u
        mean, var = conditional_moments(Z, U, Z, np.zeros(2), jitter=0.0)
        f = mean.data + np.sqrt(var.data)[:, None] * eps_f
        assert np.abs(f - u_star[:, None]).max() < 1e-5

    @pytest.mark.parametrize("free_mean", [False, True])
    def test_gradients_with_frozen_noise(self, free_mean):
        rng = np.random.default_rng(8)
        N, M, D, B = 5, 4, 3, 4

        def build(p, b):
            terms = elbo(p["V"], b["y"], p["Z"], p["alpha"], p["log_sigma2"],
                         p["log_l"], b["eps_u"], b["eps_f"], total_count=12, free_mean=free_mean)
            return {"elbo": terms.value}

        params = {
            "V": rng.normal(size=(N, D)),
            "Z": rng.normal(size=(M, D)),
            "alpha": rng.normal(size=M if free_mean else D),
            "log_sigma2": np.array(-0.5),
            "log_l": rng.normal(scale=0.2, size=D),
        }
        bindings = {"y": rng.integers(0, 2, N).astype(float), "eps_u": rng.normal(size=(B, M)), "eps_f": rng.normal(size=(N, B))}
        report = check_gradient(Graph(build, params), bindings, "elbo")
        assert report.passed, report.per_parameter
        assert set(report.per_parameter) == set(params)
