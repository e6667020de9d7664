"""Independent ground-truth engines used by tests and acceptance checks.

Everything here is deliberately decoupled from the variational and
optimizer code: exact conjugate posteriors for Bayesian linear regression,
a plain fixed-step Hamiltonian Monte Carlo sampler, central finite
differences, and a Monte Carlo check of the two Gaussian expectation
gradient identities (the mean-gradient identity and the half-Hessian
covariance-gradient identity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg


@dataclass
class BlrPosterior:
    """Exact Gaussian posterior and evidence for Bayesian linear regression."""

    mean: np.ndarray
    covariance: np.ndarray
    log_evidence: float


def blr_posterior(x: np.ndarray, y: np.ndarray, eta: float, tau: float) -> BlrPosterior:
    """Conjugate posterior for y = X w + noise, w ~ N(0, eta I), noise ~ N(0, 1/tau).

    Posterior precision is tau X^T X + eta^-1 I; the log evidence is the
    Gaussian marginal N(y; 0, tau^-1 I + eta X X^T).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if eta <= 0 or tau <= 0:
        raise ValueError("eta and tau must be positive")
    n, d = x.shape
    if n == 0:
        return BlrPosterior(np.zeros(d), eta * np.eye(d), 0.0)
    if y.shape[0] != n:
        raise ValueError(f"{n} rows but {y.shape[0]} targets")
    prec = linalg.symmetrize(tau * x.T @ x + np.eye(d) / eta)
    cov = linalg.spd_inverse(prec)
    mean = tau * cov @ x.T @ y
    marginal_cov = np.eye(n) / tau + eta * x @ x.T
    log_ev = -0.5 * (
        n * np.log(2.0 * np.pi)
        + linalg.spd_logdet(marginal_cov)
        + y @ linalg.spd_solve(marginal_cov, y)
    )
    return BlrPosterior(mean=mean, covariance=cov, log_evidence=float(log_ev))


def blr_log_density(x: np.ndarray, y: np.ndarray, eta: float, tau: float):
    """Unnormalized log posterior (and gradient) callable for HMC targets."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)

    def logp(w: np.ndarray):
        resid = y - x @ w
        value = -0.5 * tau * resid @ resid - 0.5 * w @ w / eta
        grad = tau * x.T @ resid - w / eta
        return float(value), grad

    return logp


@dataclass
class HmcConfig:
    """Fixed-step leapfrog sampler settings.

    The number of leapfrog steps per iteration is drawn uniformly between
    half of ``leapfrog_steps`` and ``leapfrog_steps``; jittering the
    trajectory length avoids resonances on near-Gaussian targets where a
    fixed length barely mixes second moments. The step size itself is
    never adapted.
    """

    step_size: float
    leapfrog_steps: int
    num_samples: int
    burn_in: int = 0
    num_chains: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if min(self.leapfrog_steps, self.num_samples, self.num_chains) < 1:
            raise ValueError("counts must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")


@dataclass
class HmcResult:
    samples: np.ndarray  # (num_chains * num_samples, d), in chain order
    accept_rates: list = field(default_factory=list)


def hmc_sample(log_density, init: np.ndarray, cfg: HmcConfig) -> HmcResult:
    """Fixed-step leapfrog HMC with Metropolis correction.

    ``log_density(x)`` must return (log p, grad log p). Chains run
    independently from split seeds and are merged in chain order, so the
    result is deterministic given ``cfg.seed``.
    """
    init = np.asarray(init, dtype=float)
    value0, _ = log_density(init)
    if not np.isfinite(value0):
        raise ValueError("log density is not finite at the initial point")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_chains)
    all_samples, accept_rates = [], []
    for seq in seeds:
        rng = np.random.default_rng(seq)
        kept, accepted = _run_chain(log_density, init, cfg, rng)
        all_samples.append(kept)
        accept_rates.append(accepted)
    return HmcResult(samples=np.concatenate(all_samples, axis=0), accept_rates=accept_rates)


def _run_chain(log_density, init, cfg: HmcConfig, rng: np.random.Generator):
    x = init.copy()
    logp, grad = log_density(x)
    total = cfg.burn_in + cfg.num_samples
    kept = np.empty((cfg.num_samples, x.shape[0]))
    n_accept = 0
    lo = max(1, cfg.leapfrog_steps // 2)
    for it in range(total):
        n_steps = int(rng.integers(lo, cfg.leapfrog_steps + 1))
        p0 = rng.standard_normal(x.shape[0])
        x_new, p_new = x.copy(), p0.copy()
        g = grad
        p_new = p_new + 0.5 * cfg.step_size * g
        for step in range(n_steps):
            x_new = x_new + cfg.step_size * p_new
            logp_new, g = log_density(x_new)
            if step < n_steps - 1:
                p_new = p_new + cfg.step_size * g
        p_new = p_new + 0.5 * cfg.step_size * g

        h_old = logp - 0.5 * p0 @ p0
        h_new = logp_new - 0.5 * p_new @ p_new
        if np.isfinite(h_new) and np.log(rng.random()) < h_new - h_old:
            x, logp, grad = x_new, logp_new, g
            n_accept += 1
        if it >= cfg.burn_in:
            kept[it - cfg.burn_in] = x
    return kept, n_accept / total


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, per coordinate."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        step = np.zeros_like(x)
        step[i] = eps
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * eps)
    return grad


@dataclass
class EstimatorReport:
    """Monte Carlo vs analytic gradients of a Gaussian expectation."""

    mu_grad_mc: np.ndarray
    mu_grad_exact: np.ndarray
    mu_grad_stderr: np.ndarray
    sigma_grad_mc: np.ndarray  # half the sampled-Hessian average
    sigma_grad_exact: np.ndarray  # finite differences of the closed-form expectation
    num_samples: int

    @property
    def mu_abs_error(self) -> np.ndarray:
        return np.abs(self.mu_grad_mc - self.mu_grad_exact)

    @property
    def sigma_abs_error(self) -> np.ndarray:
        return np.abs(self.sigma_grad_mc - self.sigma_grad_exact)


def check_gaussian_estimators(
    h: np.ndarray,
    b: np.ndarray,
    mu: np.ndarray,
    sigma: np.ndarray,
    num_samples: int,
    rng: np.random.Generator,
) -> EstimatorReport:
    """Verify the Gaussian expectation-gradient identities on a quadratic.

    For f(w) = 0.5 w^T H w + b^T w and w ~ N(mu, Sigma):

    * the mean gradient identity: d/dmu E[f] equals E[grad f], estimated by
      Monte Carlo and compared against the analytic H mu + b;
    * the covariance gradient identity: d/dSigma E[f] equals half the
      expected Hessian. The analytic side is obtained by central finite
      differences of the closed form E[f] = 0.5 mu^T H mu + b^T mu
      + 0.5 tr(H Sigma), which pins down the factor of one half.
    """
    h = linalg.symmetrize(np.asarray(h, dtype=float))
    b = np.asarray(b, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d = mu.shape[0]

    draws = linalg.sample_gaussian(mu, sigma, rng, size=num_samples)
    grads = draws @ h + b
    mu_grad_mc = grads.mean(axis=0)
    mu_grad_stderr = grads.std(axis=0, ddof=1) / np.sqrt(num_samples)
    mu_grad_exact = h @ mu + b

    # The Hessian of a quadratic is constant, so the sampled average is H.
    sigma_grad_mc = 0.5 * h

    def expectation(s: np.ndarray) -> float:
        return float(0.5 * mu @ h @ mu + b @ mu + 0.5 * np.trace(h @ s))

    eps = 1e-6
    sigma_grad_exact = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            bump = np.zeros((d, d))
            bump[i, j] = eps
            sigma_grad_exact[i, j] = (
                expectation(sigma + bump) - expectation(sigma - bump)
            ) / (2.0 * eps)

    return EstimatorReport(
        mu_grad_mc=mu_grad_mc,
        mu_grad_exact=mu_grad_exact,
        mu_grad_stderr=mu_grad_stderr,
        sigma_grad_mc=sigma_grad_mc,
        sigma_grad_exact=sigma_grad_exact,
        num_samples=num_samples,
    )
