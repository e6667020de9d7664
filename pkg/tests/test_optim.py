"""Optimizer steps against conjugate oracles, algebraic limits and references."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nngrad import linalg, model, optim, oracle, posterior
from nngrad.model import MlpArchitecture
from nngrad.optim import TrustRegionSchedule
from nngrad.posterior import GammaPosterior, Hyper


def conjugate_problem(seed=42, d=5, n=100, tau=2.0, eta=1.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    xb = np.hstack([x, np.ones((n, 1))])
    w_true = rng.standard_normal(d + 1)
    y = xb @ w_true + rng.standard_normal(n) / np.sqrt(tau)
    exact = oracle.blr_posterior(xb, y, eta=eta, tau=tau)
    return x, y, tau, exact


QUICK_PHASES = [(0.05, 0.05, 500), (0.01, 0.01, 1000), (0.002, 0.003, 2000)]


def run_phases(step_fn, state, arch, x, y, rng, tau, phases):
    for lr, beta_tilde, steps in phases:
        if isinstance(state, optim.NoisyAdamState):
            state.beta2 = 1.0 - beta_tilde
        else:
            state.beta_tilde = beta_tilde
        for _ in range(steps):
            step_fn(state, arch, x, y, rng, tau=tau, lr=lr)


class TestNoisyAdam:
    def test_zero_gradient_mu_fixed_fisher_decays(self):
        # Zero initial weights on (x=0 -> 0, y=0) data give an identically
        # zero empirical gradient: mu must not move and fbar decays by beta2.
        arch = MlpArchitecture((1, 1))
        hyper = Hyper(lam=1.0, n_train=4, eta=1e30)  # gamma_in ~ 0
        rng = np.random.default_rng(0)
        st = optim.init_noisy_adam(arch, hyper, rng, beta2=0.9)
        st.posterior.mu = np.zeros(2)
        f0 = np.array([1.0, 2.0])
        st.posterior.fbar = f0.copy()
        x = np.zeros((4, 1))
        y = np.zeros(4)  # zero weights predict exactly zero
        for k in range(5):
            optim.noisy_adam_step(
                st, arch, x, y, rng, tau=1.0, fisher="empirical", weight_noise=False
            )
            assert_allclose(st.posterior.mu, 0.0, atol=1e-25)
            assert_allclose(st.posterior.fbar, 0.9 ** (k + 1) * f0, rtol=1e-12)

    def test_one_dimensional_conjugate_mean(self):
        # With x = 0 the model reduces to its bias, whose exact posterior
        # mean is N tau ybar / (N tau + 1/eta); the input weight keeps its
        # prior and is pulled to zero.
        rng = np.random.default_rng(1)
        n, w_star, eta = 50, 1.3, 1.0
        arch = MlpArchitecture((1, 1))
        hyper = Hyper(lam=1.0, n_train=n, eta=eta)
        x = np.zeros((n, 1))
        y = np.full(n, w_star)
        exact_bias = n * w_star / (n + 1.0 / eta)
        st = optim.init_noisy_adam(arch, hyper, rng)
        for k in range(5000):
            lr = 0.01 if k < 2500 else 0.001
            optim.noisy_adam_step(st, arch, x, y, rng, tau=1.0, lr=lr)
        bias = st.posterior.mu[1]
        weight = st.posterior.mu[0]
        assert abs(bias - exact_bias) < 1e-2
        assert abs(weight) < 0.05

    def test_fisher_excludes_prior_term(self):
        # Huge mu makes the prior term dominate v; fbar must still be built
        # from the raw likelihood gradient only.
        arch = MlpArchitecture((2, 1))
        hyper = Hyper(lam=1.0, n_train=5, eta=0.01)  # strong prior pull
        rng = np.random.default_rng(2)
        st = optim.init_noisy_adam(arch, hyper, rng, beta2=0.5)
        st.posterior.mu = np.full(3, 1e3)
        st.posterior.fbar = np.ones(3)
        x = rng.standard_normal((5, 2))
        y = rng.standard_normal(5)
        tau = 1.0
        weights = posterior._unpack(st.posterior.mu, st.posterior.shapes)
        sq_expected = np.zeros(3)
        for i in range(5):
            tr = model.forward(arch, weights, x[i])
            g = model.backward(arch, weights, tr, tau * (np.atleast_1d(y[i]) - tr.output))
            sq_expected += model.pack_weights(g.weight_grads) ** 2 / 5.0
        optim.noisy_adam_step(
            st, arch, x, y, rng, tau=tau, fisher="empirical", weight_noise=False
        )
        assert_allclose(st.posterior.fbar, 0.5 * np.ones(3) + 0.5 * sq_expected, rtol=1e-12)

    def test_skips_nonfinite_gradient(self):
        arch = MlpArchitecture((1, 1))
        hyper = Hyper(lam=1.0, n_train=5, eta=1.0)
        rng = np.random.default_rng(3)
        st = optim.init_noisy_adam(arch, hyper, rng)
        mu0 = st.posterior.mu.copy()
        info = optim.noisy_adam_step(
            st, arch, np.array([[np.inf]]), np.zeros(1), rng, tau=1.0
        )
        assert info["skipped"]
        assert st.n_skipped == 1
        assert_allclose(st.posterior.mu, mu0)


class TestNoisyKfac:
    def test_zero_statistics_reduces_to_scaled_gradient_ascent(self):
        arch = MlpArchitecture((2, 1))
        hyper = Hyper(lam=1.0, n_train=8, eta=2.0, gamma_ex=0.05)
        seed = 4
        rng = np.random.default_rng(seed)
        st = optim.init_noisy_kfac(arch, hyper, rng, t_stats=10**9, t_inv=10**9)
        m0 = st.posterior.layers[0].m.copy()
        x = np.random.default_rng(99).standard_normal((8, 2))
        y = np.random.default_rng(98).standard_normal(8)
        lr, tau = 0.1, 1.5

        # Replicate the weight draw with a cloned generator, then derive the
        # expected update by hand: zero statistics make the damped inverses
        # multiply back to 1/gamma_total.
        clone = np.random.default_rng(seed)
        _ = posterior.sample_weights(
            optim.init_noisy_kfac(arch, hyper, clone, t_stats=10**9, t_inv=10**9).posterior,
            clone,
        )
        clone2 = np.random.default_rng(seed)
        st_clone = optim.init_noisy_kfac(arch, hyper, clone2, t_stats=10**9, t_inv=10**9)
        w = posterior.sample_weights(st_clone.posterior, clone2)[0]
        trace = model.forward_batch(arch, [w], x)
        gs = model.backward_batch(
            arch, [w], trace, model.output_grads(arch, trace.outputs, y, tau=tau)
        )
        grad = model.mean_weight_grads(trace, gs)[0]
        expected = m0 + lr * (grad - hyper.gamma_in * w) / hyper.gamma_total

        optim.noisy_kfac_step(st, arch, x, y, rng, tau=tau, lr=lr)
        assert_allclose(st.posterior.layers[0].m, expected, rtol=1e-10)

    def test_conjugate_posterior_mean(self):
        x, y, tau, exact = conjugate_problem()
        arch = MlpArchitecture((x.shape[1], 1))
        hyper = Hyper(lam=1.0, n_train=x.shape[0], eta=1.0)
        rng = np.random.default_rng(5)
        st = optim.init_noisy_kfac(arch, hyper, rng, t_stats=1, t_inv=1)
        run_phases(optim.noisy_kfac_step, st, arch, x, y, rng, tau, QUICK_PHASES)
        mu = st.posterior.layers[0].m[:, 0]
        rel = np.linalg.norm(mu - exact.mean) / np.linalg.norm(exact.mean)
        assert rel < 1e-2

    def test_scalar_statistics_match_dense_preconditioning(self):
        # On a 1x1 layer with matching statistics (f = a * s), the Kronecker
        # and dense representations agree: exactly at zero statistics, and up
        # to the vanishing damping cross-term otherwise.
        lam, n = 1.0, 10
        a_val, s_val = 1.7, 0.6

        # Zero statistics, any damping: both preconditioners are 1/gamma.
        hyper = Hyper(lam=lam, n_train=n, eta=0.5, gamma_ex=0.02)
        layer = posterior.MvgLayer(m=np.zeros((1, 1)), abar=np.zeros((1, 1)), sbar=np.zeros((1, 1)))
        mvg = posterior.MvgPosterior(layers=[layer], hyper=hyper)
        posterior.refresh_damped_inverses(mvg, use_total_damping=True)
        posterior.refresh_damped_inverses(mvg, use_total_damping=False)
        kfac_precond = float(layer.step_inv_a[0, 0] * layer.step_inv_s[0, 0])
        assert_allclose(kfac_precond, 1.0 / hyper.gamma_total, rtol=1e-12)
        kfac_var = float(hyper.scale * layer.sample_inv_a[0, 0] * layer.sample_inv_s[0, 0])
        assert_allclose(kfac_var, hyper.eta, rtol=1e-12)

        # Nonzero scalar statistics, negligible damping.
        hyper2 = Hyper(lam=lam, n_train=n, eta=1e12)
        layer2 = posterior.MvgLayer(
            m=np.zeros((1, 1)), abar=np.array([[a_val]]), sbar=np.array([[s_val]])
        )
        mvg2 = posterior.MvgPosterior(layers=[layer2], hyper=hyper2)
        posterior.refresh_damped_inverses(mvg2, use_total_damping=True)
        posterior.refresh_damped_inverses(mvg2, use_total_damping=False)
        full = posterior.FullPosterior(
            mu=np.zeros(1), fbar=np.array([[a_val * s_val]]), hyper=hyper2, shapes=[(1, 1)]
        )
        kfac_precond = float(layer2.step_inv_a[0, 0] * layer2.step_inv_s[0, 0])
        full_precond = 1.0 / (a_val * s_val + hyper2.gamma_in)
        assert_allclose(kfac_precond, full_precond, rtol=1e-5)
        kfac_var = float(hyper2.scale * layer2.sample_inv_a[0, 0] * layer2.sample_inv_s[0, 0])
        full_var = 1.0 / float(posterior.precision(full)[0, 0])
        assert_allclose(kfac_var, full_var, rtol=1e-5)


class TestNoisyFull:
    def test_conjugate_posterior(self):
        x, y, tau, exact = conjugate_problem()
        arch = MlpArchitecture((x.shape[1], 1))
        hyper = Hyper(lam=1.0, n_train=x.shape[0], eta=1.0)
        rng = np.random.default_rng(6)
        st = optim.init_noisy_full(arch, hyper, rng)
        run_phases(optim.noisy_full_step, st, arch, x, y, rng, tau, QUICK_PHASES)
        rel_mu = np.linalg.norm(st.posterior.mu - exact.mean) / np.linalg.norm(exact.mean)
        cov = linalg.spd_inverse(st.posterior.precision_matrix())
        rel_cov = np.linalg.norm(cov - exact.covariance) / np.linalg.norm(exact.covariance)
        assert rel_mu < 1e-2
        assert rel_cov < 3e-2

    def test_expected_update_vanishes_at_exact_posterior(self):
        x, y, tau, exact = conjugate_problem(seed=7)
        n = x.shape[0]
        arch = MlpArchitecture((x.shape[1], 1))
        hyper = Hyper(lam=1.0, n_train=n, eta=1.0)
        fbar = linalg.symmetrize(
            hyper.scale * (linalg.spd_inverse(exact.covariance) - np.eye(6) / hyper.eta)
        )
        p = posterior.FullPosterior(
            mu=exact.mean.copy(), fbar=fbar, hyper=hyper, shapes=arch.weight_shapes
        )
        rng = np.random.default_rng(8)
        damped = p.fbar + hyper.gamma_in * np.eye(6)
        directions = np.empty((2000, 6))
        for k in range(2000):
            weights = posterior.sample_weights(p, rng)
            trace = model.forward_batch(arch, weights, x)
            gs = model.backward_batch(
                arch, weights, trace, model.output_grads(arch, trace.outputs, y, tau=tau)
            )
            grad = model.pack_weights(model.mean_weight_grads(trace, gs))
            w_vec = model.pack_weights(weights)
            directions[k] = linalg.spd_solve(damped, grad - hyper.gamma_in * w_vec)
        mean = directions.mean(axis=0)
        se = directions.std(axis=0, ddof=1) / np.sqrt(directions.shape[0])
        assert np.all(np.abs(mean) < 3.0 * se + 1e-12)

    def test_fisher_stays_symmetric_psd(self):
        rng = np.random.default_rng(9)
        arch = MlpArchitecture((2, 2, 1), activation="tanh")
        hyper = Hyper(lam=1.0, n_train=20, eta=1.0)
        st = optim.init_noisy_full(arch, hyper, rng)
        for _ in range(2000):
            x = rng.standard_normal((4, 2))
            y = rng.standard_normal(4)
            optim.noisy_full_step(st, arch, x, y, rng, tau=1.0)
        fbar = st.posterior.fbar
        assert_allclose(fbar, fbar.T)
        assert np.linalg.eigvalsh(fbar)[0] >= -1e-10


class TestHyperparameterDisentanglement:
    def _raw_reference(self, arch, x, y, tau, hyper, alpha_tilde, beta_tilde, seed, steps):
        """Update loop in the raw learning-rate parameterization.

        Uses alpha = alpha_tilde N / lam and beta = beta_tilde N / lam and
        keeps the precision matrix itself as state.
        """
        n_over_lam = hyper.n_train / hyper.lam
        alpha_raw = alpha_tilde * n_over_lam
        beta_raw = beta_tilde * n_over_lam
        gamma_in = hyper.gamma_in
        rng = np.random.default_rng(seed)
        init_rng = np.random.default_rng(seed)
        mu = model.pack_weights(model.init_weights(arch, init_rng))
        d = mu.shape[0]
        lam_mat = np.eye(d) / hyper.eta  # Fbar = 0
        trajectory = []
        nb = x.shape[0]
        for _ in range(steps):
            cov = linalg.spd_inverse(linalg.symmetrize(lam_mat))
            w_vec = linalg.sample_gaussian(mu, cov, rng)
            weights = model.unpack_weights(w_vec, arch)
            trace = model.forward_batch(arch, weights, x)
            gs = model.backward_batch(
                arch, weights, trace, model.output_grads(arch, trace.outputs, y, tau=tau)
            )
            grad = model.pack_weights(model.mean_weight_grads(trace, gs))
            sampled = model.sample_targets_batch(arch, trace.outputs, tau, rng)
            gs_f = model.backward_batch(
                arch, weights, trace, model.output_grads(arch, trace.outputs, sampled, tau=tau)
            )
            packed = optim._per_example_packed(trace, gs_f)
            fhat = packed.T @ packed / nb
            lam_mat = linalg.symmetrize(
                (1.0 - hyper.lam * beta_raw / hyper.n_train) * lam_mat
                + beta_raw * (fhat + gamma_in * np.eye(d))
            )
            mu = mu + alpha_raw * linalg.spd_solve(lam_mat, grad - gamma_in * w_vec)
            trajectory.append(mu.copy())
        return trajectory

    def test_raw_and_tilde_iterates_coincide(self):
        rng_data = np.random.default_rng(10)
        n, d = 30, 2
        x = rng_data.standard_normal((n, d))
        y = x @ rng_data.standard_normal(d) + 0.3 * rng_data.standard_normal(n)
        tau = 1.0
        arch = MlpArchitecture((d, 1))
        hyper = Hyper(lam=1.3, n_train=n, eta=0.7)
        alpha_tilde, beta_tilde, steps, seed = 0.01, 0.01, 100, 11

        raw = self._raw_reference(arch, x, y, tau, hyper, alpha_tilde, beta_tilde, seed, steps)

        rng = np.random.default_rng(seed)
        init_rng = np.random.default_rng(seed)
        mu0 = model.pack_weights(model.init_weights(arch, init_rng))
        st = optim.init_noisy_full(
            arch, hyper, np.random.default_rng(0), alpha_tilde=alpha_tilde, beta_tilde=beta_tilde
        )
        st.posterior.mu = mu0
        st.posterior.fbar = np.zeros_like(st.posterior.fbar)
        for k in range(steps):
            optim.noisy_full_step(st, arch, x, y, rng, tau=tau)
            scale = max(1.0, np.max(np.abs(st.posterior.mu)))
            assert np.max(np.abs(st.posterior.mu - raw[k])) <= 1e-12 * scale


class TestMapReduction:
    def _reference_no_sqrt_adam(self, arch, x, y, tau, alpha, beta1, beta2, gamma, steps):
        """Point-estimate variant: no weight noise, no prior, no square root."""
        rng = np.random.default_rng(123)
        mu = model.pack_weights(model.init_weights(arch, rng))
        m = np.zeros_like(mu)
        f = np.zeros_like(mu)
        trajectory = []
        for k in range(1, steps + 1):
            weights = model.unpack_weights(mu, arch)
            trace = model.forward_batch(arch, weights, x)
            gs = model.backward_batch(
                arch, weights, trace, model.output_grads(arch, trace.outputs, y, tau=tau)
            )
            grad = model.pack_weights(model.mean_weight_grads(trace, gs))
            sq = optim._squared_grad_vector(trace, gs)
            m = beta1 * m + (1.0 - beta1) * grad
            f = beta2 * f + (1.0 - beta2) * sq
            m_tilde = m / (1.0 - beta1**k)
            mu = mu + alpha * m_tilde / (f + gamma)
            trajectory.append(mu.copy())
        return trajectory

    def test_matches_reference_when_noise_and_prior_vanish(self):
        rng_data = np.random.default_rng(12)
        n, d = 16, 3
        x = rng_data.standard_normal((n, d))
        y = x @ rng_data.standard_normal(d) + 0.1 * rng_data.standard_normal(n)
        tau, alpha, beta1, beta2, gamma_ex, steps = 1.0, 0.02, 0.9, 0.99, 1e-8, 200
        arch = MlpArchitecture((d, 2, 1), activation="tanh")

        reference = self._reference_no_sqrt_adam(
            arch, x, y, tau, alpha, beta1, beta2, gamma_ex, steps
        )

        hyper = Hyper(lam=1.0, n_train=n, eta=1e30, gamma_ex=gamma_ex)
        st = optim.init_noisy_adam(
            arch, hyper, np.random.default_rng(123), alpha=alpha, beta1=beta1, beta2=beta2
        )
        rng = np.random.default_rng(0)
        for k in range(steps):
            optim.noisy_adam_step(
                st, arch, x, y, rng, tau=tau, fisher="empirical", weight_noise=False
            )
            assert_allclose(st.posterior.mu, reference[k], rtol=1e-10, atol=1e-12)


class TestTrustRegion:
    def test_budget_matched_direction(self):
        sched = TrustRegionSchedule(c0=0.5, zeta=1.0, alpha_max=2.0)
        # v^T F v equals the budget: step size is min(alpha_max, 1).
        v = np.array([np.sqrt(0.5)])
        assert_allclose(optim.trust_region_lr(v, np.ones(1), sched), 1.0)

    def test_zero_direction_returns_cap(self):
        sched = TrustRegionSchedule(c0=0.01, zeta=0.9, alpha_max=0.1)
        assert optim.trust_region_lr(np.zeros(3), np.ones(3), sched) == 0.1

    def test_reference_schedule_values(self):
        sched = TrustRegionSchedule(c0=0.001, zeta=0.95, alpha_max=0.01)
        v = np.array([np.sqrt(10.0)])
        fisher = np.ones(1)
        assert_allclose(optim.trust_region_lr(v, fisher, sched), 0.01)
        sched.advance_epoch()
        assert_allclose(sched.budget, 0.001 * 0.95)

    def test_kronecker_representation(self):
        rng = np.random.default_rng(13)
        v = [rng.standard_normal((2, 2))]
        left = np.eye(2)
        right = 2.0 * np.eye(2)
        pairs = [linalg.KroneckerPair(left=left, right=right, scale=1.0)]
        sched = TrustRegionSchedule(c0=1.0, zeta=1.0, alpha_max=100.0)
        quad = 2.0 * np.sum(v[0] ** 2)
        assert_allclose(optim.trust_region_lr(v, pairs, sched), np.sqrt(1.0 / quad))


class TestGammaTauStep:
    def _fixed_weight_posterior(self, arch, hyper, w_vec):
        return posterior.FfgPosterior(
            mu=w_vec.copy(),
            fbar=np.full(w_vec.shape[0], 1e18),
            hyper=hyper,
            shapes=arch.weight_shapes,
        )

    def test_zero_gradient_at_conjugate_optimum(self):
        rng = np.random.default_rng(14)
        n, d = 30, 2
        x = rng.standard_normal((n, d))
        arch = MlpArchitecture((d, 1))
        hyper = Hyper(lam=1.0, n_train=n, eta=1.0)
        w_vec = rng.standard_normal(3)
        weights = model.unpack_weights(w_vec, arch)
        y = model.forward_batch(arch, weights, x).outputs[:, 0] + 0.5 * rng.standard_normal(n)
        resid2 = np.sum((y - model.forward_batch(arch, weights, x).outputs[:, 0]) ** 2)
        prior = GammaPosterior(6.0, 6.0)
        q_star = GammaPosterior(alpha=6.0 + n / 2.0, beta=6.0 + resid2 / 2.0)
        p = self._fixed_weight_posterior(arch, hyper, w_vec)
        stepped = optim.gamma_tau_step(q_star, p, arch, x, y, rng, lr=1e-3, prior=prior)
        assert abs(np.log(stepped.alpha / q_star.alpha)) < 1e-6
        assert abs(np.log(stepped.beta / q_star.beta)) < 1e-6

    def test_kl_gradient_zero_at_prior(self):
        prior = GammaPosterior(6.0, 6.0)

        def kl_of(params):
            return posterior.gamma_kl(GammaPosterior(params[0], params[1]), prior)

        grad = oracle.finite_diff_grad(kl_of, np.array([6.0, 6.0]), eps=1e-5)
        assert_allclose(grad, 0.0, atol=1e-8)

    def test_parameters_stay_positive(self):
        rng = np.random.default_rng(15)
        arch = MlpArchitecture((1, 1))
        hyper = Hyper(lam=1.0, n_train=10, eta=1.0)
        p = self._fixed_weight_posterior(arch, hyper, np.array([5.0, -3.0]))
        q = GammaPosterior(6.0, 6.0)
        x = rng.standard_normal((10, 1))
        y = 100.0 * rng.standard_normal(10)  # large residuals, strong pull
        for _ in range(20):
            q = optim.gamma_tau_step(q, p, arch, x, y, rng, lr=0.05, prior=GammaPosterior(6.0, 6.0))
            assert q.alpha > 0 and q.beta > 0


class TestInvariantsUnderRandomSteps:
    def test_families_preserve_posterior_invariants(self):
        rng = np.random.default_rng(16)
        arch = MlpArchitecture((2, 3, 1), activation="relu")
        hyper = Hyper(lam=1.0, n_train=25, eta=1.0, gamma_ex=0.001)
        adam = optim.init_noisy_adam(arch, hyper, rng)
        kfac = optim.init_noisy_kfac(arch, hyper, rng, t_stats=1, t_inv=5)
        full = optim.init_noisy_full(arch, hyper, rng)
        for _ in range(300):
            x = rng.standard_normal((5, 2))
            y = rng.standard_normal(5)
            optim.noisy_adam_step(adam, arch, x, y, rng, tau=1.0)
            optim.noisy_kfac_step(kfac, arch, x, y, rng, tau=1.0)
            optim.noisy_full_step(full, arch, x, y, rng, tau=1.0)
        assert np.all(adam.posterior.fbar >= 0.0)
        assert np.linalg.eigvalsh(full.posterior.fbar)[0] >= -1e-10
        for layer in kfac.posterior.layers:
            assert np.linalg.eigvalsh(layer.abar)[0] >= -1e-10
            assert np.linalg.eigvalsh(layer.sbar)[0] >= -1e-10
            a_damped, s_damped, _ = posterior.damped_factors(
                layer, hyper.gamma_total, layer.pi
            )
            assert_allclose(a_damped @ layer.step_inv_a, np.eye(a_damped.shape[0]), atol=1e-8)
            assert_allclose(s_damped @ layer.step_inv_s, np.eye(s_damped.shape[0]), atol=1e-8)
