"""Ground-truth engines: conjugate regression, HMC, finite differences, identities."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nngrad import linalg, model, oracle
from nngrad.model import MlpArchitecture
from nngrad.oracle import HmcConfig


class TestBlrPosterior:
    def test_empty_design_returns_prior(self):
        post = oracle.blr_posterior(np.zeros((0, 3)), np.zeros(0), eta=2.0, tau=1.0)
        assert_allclose(post.mean, 0.0)
        assert_allclose(post.covariance, 2.0 * np.eye(3))
        assert post.log_evidence == 0.0

    def test_scalar_hand_case(self):
        post = oracle.blr_posterior(np.array([[1.0]]), np.array([1.0]), eta=1.0, tau=1.0)
        assert_allclose(post.mean, [0.5])
        assert_allclose(post.covariance, [[0.5]])

    def test_log_posterior_gradient_vanishes_at_mean(self):
        rng = np.random.default_rng(40)
        x = rng.standard_normal((25, 4))
        y = x @ rng.standard_normal(4) + 0.3 * rng.standard_normal(25)
        eta, tau = 0.8, 1.7
        post = oracle.blr_posterior(x, y, eta=eta, tau=tau)

        def log_post(w):
            resid = y - x @ w
            return -0.5 * tau * resid @ resid - 0.5 * w @ w / eta

        grad = oracle.finite_diff_grad(log_post, post.mean, eps=1e-6)
        assert_allclose(grad, 0.0, atol=1e-6)

    def test_evidence_against_direct_marginal(self):
        # Cross-check the evidence against a literal multivariate-normal
        # density evaluation of y under the marginal N(0, I/tau + eta X X^T).
        rng = np.random.default_rng(41)
        x = rng.standard_normal((6, 2))
        y = rng.standard_normal(6)
        eta, tau = 1.3, 2.2
        post = oracle.blr_posterior(x, y, eta=eta, tau=tau)
        cov = np.eye(6) / tau + eta * x @ x.T
        sign, logdet = np.linalg.slogdet(cov)
        expected = -0.5 * (6 * np.log(2 * np.pi) + logdet + y @ np.linalg.solve(cov, y))
        assert_allclose(post.log_evidence, expected, rtol=1e-10)

    def test_fixed_point_of_precision(self):
        # For a linear-Gaussian model the negative log-joint Hessian is the
        # constant tau X^T X + I/eta; the posterior precision equals it exactly.
        rng = np.random.default_rng(42)
        x = rng.standard_normal((15, 3))
        y = rng.standard_normal(15)
        eta, tau = 1.0, 2.0
        post = oracle.blr_posterior(x, y, eta=eta, tau=tau)
        hessian = tau * x.T @ x + np.eye(3) / eta
        assert_allclose(linalg.spd_inverse(post.covariance), hessian, rtol=1e-9)


def gaussian_target(d):
    def logp(x):
        return -0.5 * float(x @ x), -x

    return logp


class TestHmc:
    def test_standard_gaussian_moments(self):
        cfg = HmcConfig(
            step_size=0.3, leapfrog_steps=10, num_samples=5000, burn_in=500, num_chains=2, seed=1
        )
        result = oracle.hmc_sample(gaussian_target(2), np.zeros(2), cfg)
        samples = result.samples
        assert samples.shape == (10_000, 2)
        se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
        assert np.all(np.abs(samples.mean(axis=0)) < 3.0 * se)
        cov = np.cov(samples.T)
        assert np.linalg.norm(cov - np.eye(2)) / np.sqrt(2.0) < 0.10

    def test_tiny_step_acceptance_tends_to_one(self):
        cfg = HmcConfig(
            step_size=1e-4, leapfrog_steps=1, num_samples=500, burn_in=0, num_chains=1, seed=2
        )
        result = oracle.hmc_sample(gaussian_target(3), np.zeros(3), cfg)
        assert result.accept_rates[0] > 0.999

    def test_blr_target_matches_conjugate_oracle(self):
        rng = np.random.default_rng(43)
        x = rng.standard_normal((30, 3))
        y = x @ rng.standard_normal(3) + 0.5 * rng.standard_normal(30)
        eta, tau = 1.0, 4.0
        exact = oracle.blr_posterior(x, y, eta=eta, tau=tau)
        cfg = HmcConfig(
            step_size=0.08, leapfrog_steps=15, num_samples=5000, burn_in=1000, num_chains=4, seed=3
        )
        result = oracle.hmc_sample(oracle.blr_log_density(x, y, eta, tau), np.zeros(3), cfg)
        mean_err = np.linalg.norm(result.samples.mean(axis=0) - exact.mean) / np.linalg.norm(
            exact.mean
        )
        cov_err = np.linalg.norm(np.cov(result.samples.T) - exact.covariance) / np.linalg.norm(
            exact.covariance
        )
        assert mean_err < 0.05
        assert cov_err < 0.05

    def test_deterministic_given_seed(self):
        cfg = HmcConfig(
            step_size=0.2, leapfrog_steps=5, num_samples=50, burn_in=10, num_chains=2, seed=4
        )
        a = oracle.hmc_sample(gaussian_target(2), np.zeros(2), cfg)
        b = oracle.hmc_sample(gaussian_target(2), np.zeros(2), cfg)
        assert_allclose(a.samples, b.samples)
        assert a.accept_rates == b.accept_rates

    def test_nonfinite_init_rejected(self):
        cfg = HmcConfig(step_size=0.1, leapfrog_steps=2, num_samples=10)

        def bad(x):
            return float("-inf"), np.zeros_like(x)

        with pytest.raises(ValueError):
            oracle.hmc_sample(bad, np.zeros(2), cfg)


class TestFiniteDiff:
    def test_constant_function(self):
        assert_allclose(oracle.finite_diff_grad(lambda x: 3.0, np.ones(4)), 0.0)

    def test_half_norm_squared(self):
        x = np.array([0.5, -1.5, 2.0])
        grad = oracle.finite_diff_grad(lambda v: 0.5 * float(v @ v), x)
        assert_allclose(grad, x, atol=1e-9)

    def test_matches_network_backward(self):
        rng = np.random.default_rng(44)
        arch = MlpArchitecture((3, 4, 1), activation="tanh")
        weights = model.init_weights(arch, rng)
        x = rng.standard_normal(3)
        y = np.array([0.7])

        def loglik(w_vec):
            ws = model.unpack_weights(w_vec, arch)
            out = model.forward(arch, ws, x).output
            return model.log_likelihood(arch, out, y, tau=2.0)

        trace = model.forward(arch, weights, x)
        grads = model.backward(arch, weights, trace, 2.0 * (y - trace.output))
        fd = oracle.finite_diff_grad(loglik, model.pack_weights(weights), eps=1e-5)
        assert_allclose(model.pack_weights(grads.weight_grads), fd, rtol=1e-5, atol=1e-8)


class TestGaussianEstimators:
    def test_zero_quadratic_is_exact(self):
        rng = np.random.default_rng(45)
        report = oracle.check_gaussian_estimators(
            np.zeros((2, 2)), np.zeros(2), np.zeros(2), np.eye(2), 1000, rng
        )
        assert_allclose(report.mu_grad_mc, 0.0)
        assert_allclose(report.sigma_grad_mc, 0.0)
        assert_allclose(report.sigma_grad_exact, 0.0, atol=1e-12)

    def test_one_dimensional_squared(self):
        # f = w^2 with mu = 0, sigma^2 = 1: E[f] = mu^2 + sigma^2, so the
        # mean gradient is 0 and the variance gradient is 1.
        rng = np.random.default_rng(46)
        report = oracle.check_gaussian_estimators(
            np.array([[2.0]]), np.zeros(1), np.zeros(1), np.eye(1), 100_000, rng
        )
        assert np.abs(report.mu_grad_mc[0]) < 3.0 * report.mu_grad_stderr[0]
        assert_allclose(report.sigma_grad_mc, [[1.0]])
        assert_allclose(report.sigma_grad_exact, [[1.0]], atol=1e-8)

    def test_random_three_dimensional_quadratic(self):
        rng = np.random.default_rng(47)
        a = rng.standard_normal((3, 3))
        h = linalg.symmetrize(a @ a.T) - 0.4 * np.eye(3)
        b = rng.standard_normal(3)
        mu = rng.standard_normal(3)
        c = rng.standard_normal((3, 3))
        sigma = linalg.symmetrize(c @ c.T) + 0.3 * np.eye(3)
        report = oracle.check_gaussian_estimators(h, b, mu, sigma, 100_000, rng)
        assert np.all(report.mu_abs_error <= 3.0 * report.mu_grad_stderr)
        assert np.max(report.sigma_abs_error) < 1e-6

    def test_half_factor_convention_is_the_consistent_one(self):
        # The covariance gradient of the expectation equals HALF the expected
        # Hessian: the half form passes, the no-half form fails for H != 0.
        rng = np.random.default_rng(48)
        h = np.array([[1.5, 0.2], [0.2, 0.9]])
        report = oracle.check_gaussian_estimators(
            h, np.zeros(2), np.zeros(2), np.eye(2), 1000, rng
        )
        half_error = np.max(np.abs(report.sigma_grad_mc - report.sigma_grad_exact))
        no_half_error = np.max(np.abs(2.0 * report.sigma_grad_mc - report.sigma_grad_exact))
        assert half_error < 1e-6
        assert no_half_error > 0.4
