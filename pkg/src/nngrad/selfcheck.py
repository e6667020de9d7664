"""Built-in oracle suites behind the ``check`` CLI command.

Four suites run in order: Kronecker-inverse equivalence against dense
expansions, the Gaussian expectation-gradient identities, convergence of
all three optimizers to an exact conjugate linear-regression posterior,
and agreement of the HMC sampler with that same conjugate oracle. Each
suite reports a pass flag plus the measured errors.
"""

from __future__ import annotations

import numpy as np

from . import linalg, optim, oracle
from .model import MlpArchitecture
from .posterior import Hyper


def _suite_kronecker(fast: bool, rng: np.random.Generator) -> dict:
    trials = 50 if fast else 200
    worst = 0.0
    for _ in range(trials):
        p = int(rng.integers(1, 5))
        q = int(rng.integers(1, 5))
        a = rng.standard_normal((p, p + 2))
        s = rng.standard_normal((q, q + 2))
        right = linalg.symmetrize(a @ a.T) + 0.1 * np.eye(p)
        left = linalg.symmetrize(s @ s.T) + 0.1 * np.eye(q)
        scale = float(rng.uniform(0.2, 5.0))
        v = rng.standard_normal((p, q))
        pair = linalg.KroneckerPair(left=left, right=right, scale=scale)
        dense = scale * np.kron(left, right)
        expected = linalg.unvec(np.linalg.solve(dense, linalg.vec(v)), (p, q))
        got = linalg.kron_solve(pair, v)
        err = np.linalg.norm(got - expected) / max(np.linalg.norm(expected), 1e-30)
        worst = max(worst, err)
    return {"name": "kronecker_inverse", "passed": bool(worst < 1e-9), "max_rel_error": worst}


def _suite_estimators(fast: bool, rng: np.random.Generator) -> dict:
    num_samples = 20_000 if fast else 100_000
    d = 3
    a = rng.standard_normal((d, d))
    h = linalg.symmetrize(a @ a.T) - 0.5 * np.eye(d)  # indefinite is fine
    b = rng.standard_normal(d)
    mu = rng.standard_normal(d)
    c = rng.standard_normal((d, d))
    sigma = linalg.symmetrize(c @ c.T) + 0.5 * np.eye(d)
    report = oracle.check_gaussian_estimators(h, b, mu, sigma, num_samples, rng)
    mu_ok = bool(np.all(report.mu_abs_error <= 3.0 * report.mu_grad_stderr + 1e-12))
    sigma_ok = bool(np.max(report.sigma_abs_error) < 1e-4)
    return {
        "name": "gaussian_gradient_identities",
        "passed": mu_ok and sigma_ok,
        "mu_max_abs_error": float(np.max(report.mu_abs_error)),
        "mu_max_stderr": float(np.max(report.mu_grad_stderr)),
        "sigma_max_abs_error": float(np.max(report.sigma_abs_error)),
    }


def _conjugate_problem(rng: np.random.Generator):
    d, n = 5, 100
    x = rng.standard_normal((n, d))
    xb = np.hstack([x, np.ones((n, 1))])
    w_true = rng.standard_normal(d + 1)
    tau = 2.0
    y = xb @ w_true + rng.standard_normal(n) / np.sqrt(tau)
    exact = oracle.blr_posterior(xb, y, eta=1.0, tau=tau)
    return x, y, tau, exact


def _run_phases(step_fn, state, arch, x, y, rng, tau, phases):
    for lr, beta_tilde, steps in phases:
        if hasattr(state, "beta_tilde"):
            state.beta_tilde = beta_tilde
        else:
            state.beta2 = 1.0 - beta_tilde
        for _ in range(steps):
            step_fn(state, arch, x, y, rng, tau=tau, lr=lr)
    return state


def _suite_conjugate(fast: bool, rng: np.random.Generator) -> dict:
    x, y, tau, exact = _conjugate_problem(rng)
    n = x.shape[0]
    arch = MlpArchitecture((x.shape[1], 1), likelihood="gaussian")
    hyper = Hyper(lam=1.0, n_train=n, eta=1.0)
    if fast:
        phases = [(0.05, 0.05, 500), (0.01, 0.01, 1000), (0.002, 0.003, 2000)]
        tol_mean, tol_cov = 2e-2, 5e-2
    else:
        phases = [(0.05, 0.05, 1000), (0.01, 0.01, 2000), (0.001, 0.003, 4000), (1e-4, 0.001, 8000)]
        tol_mean, tol_cov = 1e-3, 1e-2

    details, passed = {}, True

    st_full = optim.init_noisy_full(arch, hyper, rng)
    _run_phases(optim.noisy_full_step, st_full, arch, x, y, rng, tau, phases)
    mean_norm = np.linalg.norm(exact.mean)
    err_mu = float(np.linalg.norm(st_full.posterior.mu - exact.mean) / mean_norm)
    cov = linalg.spd_inverse(st_full.posterior.precision_matrix())
    err_cov = float(np.linalg.norm(cov - exact.covariance) / np.linalg.norm(exact.covariance))
    details["full_mean_rel"] = err_mu
    details["full_cov_rel"] = err_cov
    passed &= err_mu < tol_mean and err_cov < tol_cov

    st_kfac = optim.init_noisy_kfac(arch, hyper, rng, t_stats=1, t_inv=1)
    _run_phases(optim.noisy_kfac_step, st_kfac, arch, x, y, rng, tau, phases)
    err_kfac = float(
        np.linalg.norm(st_kfac.posterior.layers[0].m[:, 0] - exact.mean) / mean_norm
    )
    details["kfac_mean_rel"] = err_kfac
    passed &= err_kfac < tol_mean

    st_adam = optim.init_noisy_adam(arch, hyper, rng)
    _run_phases(optim.noisy_adam_step, st_adam, arch, x, y, rng, tau, phases)
    err_adam = float(np.linalg.norm(st_adam.posterior.mu - exact.mean) / mean_norm)
    details["adam_mean_rel"] = err_adam
    # The diagonal family cannot represent posterior correlations, but its
    # stationary mean still matches the conjugate mean.
    passed &= err_adam < max(tol_mean, 5e-3)

    return {"name": "conjugate_posterior_convergence", "passed": bool(passed), **details}


def _suite_hmc(fast: bool, rng: np.random.Generator) -> dict:
    d, n = 3, 40
    x = rng.standard_normal((n, d))
    tau = 3.0
    y = x @ rng.standard_normal(d) + rng.standard_normal(n) / np.sqrt(tau)
    exact = oracle.blr_posterior(x, y, eta=1.0, tau=tau)
    cfg = oracle.HmcConfig(
        step_size=0.1,
        leapfrog_steps=15,
        num_samples=2000 if fast else 5000,
        burn_in=300 if fast else 1000,
        num_chains=2 if fast else 4,
        seed=int(rng.integers(2**31)),
    )
    result = oracle.hmc_sample(
        oracle.blr_log_density(x, y, eta=1.0, tau=tau), np.zeros(d), cfg
    )
    mean_err = float(
        np.linalg.norm(result.samples.mean(axis=0) - exact.mean)
        / np.linalg.norm(exact.mean)
    )
    cov_err = float(
        np.linalg.norm(np.cov(result.samples.T) - exact.covariance)
        / np.linalg.norm(exact.covariance)
    )
    tol = 0.10 if fast else 0.05
    return {
        "name": "hmc_vs_conjugate",
        "passed": bool(mean_err < tol and cov_err < 2 * tol),
        "mean_rel_error": mean_err,
        "cov_rel_error": cov_err,
        "accept_rates": [float(a) for a in result.accept_rates],
    }


def run_suites(fast: bool = False, seed: int = 0) -> dict:
    """Run all suites in order; returns per-suite reports and an overall flag."""
    seqs = np.random.SeedSequence(seed).spawn(4)
    suites = [
        _suite_kronecker(fast, np.random.default_rng(seqs[0])),
        _suite_estimators(fast, np.random.default_rng(seqs[1])),
        _suite_conjugate(fast, np.random.default_rng(seqs[2])),
        _suite_hmc(fast, np.random.default_rng(seqs[3])),
    ]
    return {"suites": suites, "all_passed": bool(all(s["passed"] for s in suites))}
