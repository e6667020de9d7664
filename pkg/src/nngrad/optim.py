"""Noisy natural-gradient optimizers for the three variational families.

Each step draws weights from the current posterior, takes a stochastic
natural-gradient step on the evidence lower bound, and refreshes the
family's Fisher moving average from the same minibatch. Targets for the
Fisher statistics are sampled from the model's own predictions by default
(``fisher="true"``); ``fisher="empirical"`` reuses the observed targets.

Minibatch scaling convention: the data gradient is the mean of per-example
log-likelihood gradients, and Fisher statistics average per-example outer
products over the batch. A step whose gradient is nonfinite is skipped and
counted, leaving the state untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg, model, posterior as post_mod
from .linalg import KroneckerPair
from .model import MlpArchitecture
from .posterior import (
    FfgPosterior,
    FullPosterior,
    GammaPosterior,
    Hyper,
    MvgPosterior,
    refresh_damped_inverses,
    sample_weights,
)


@dataclass
class NoisyAdamState:
    """Fully factorized posterior trained with momentum and diagonal Fisher."""

    posterior: FfgPosterior
    m: np.ndarray
    k: int = 0
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    n_skipped: int = 0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("decay rates must lie in [0, 1)")


@dataclass
class NoisyKfacState:
    """Matrix-variate posterior trained with Kronecker-factored curvature."""

    posterior: MvgPosterior
    k: int = 0
    alpha: float = 0.01
    beta_tilde: float = 0.001
    t_stats: int = 1
    t_inv: int = 20
    n_skipped: int = 0

    def __post_init__(self):
        if self.t_stats < 1 or self.t_inv < 1:
            raise ValueError("update intervals must be >= 1")


@dataclass
class NoisyFullState:
    """Full-covariance posterior; dense Fisher, small weight counts only."""

    posterior: FullPosterior
    alpha_tilde: float = 0.01
    beta_tilde: float = 0.001
    k: int = 0
    n_skipped: int = 0

    def __post_init__(self):
        if self.alpha_tilde <= 0 or self.beta_tilde <= 0:
            raise ValueError("learning rates must be positive")


def init_noisy_adam(
    arch: MlpArchitecture,
    hyper: Hyper,
    rng: np.random.Generator,
    alpha: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
) -> NoisyAdamState:
    p = post_mod.init_ffg(arch, hyper, rng)
    return NoisyAdamState(
        posterior=p, m=np.zeros_like(p.mu), alpha=alpha, beta1=beta1, beta2=beta2
    )


def init_noisy_kfac(
    arch: MlpArchitecture,
    hyper: Hyper,
    rng: np.random.Generator,
    alpha: float = 0.01,
    beta_tilde: float = 0.001,
    t_stats: int = 1,
    t_inv: int = 20,
) -> NoisyKfacState:
    return NoisyKfacState(
        posterior=post_mod.init_mvg(arch, hyper, rng),
        alpha=alpha,
        beta_tilde=beta_tilde,
        t_stats=t_stats,
        t_inv=t_inv,
    )


def init_noisy_full(
    arch: MlpArchitecture,
    hyper: Hyper,
    rng: np.random.Generator,
    alpha_tilde: float = 0.01,
    beta_tilde: float = 0.001,
) -> NoisyFullState:
    return NoisyFullState(
        posterior=post_mod.init_full(arch, hyper, rng),
        alpha_tilde=alpha_tilde,
        beta_tilde=beta_tilde,
    )


# ---------------------------------------------------------------------------
# Shared minibatch machinery


def _data_pass(arch, weights, x, y, tau):
    """Forward/backward on the observed targets; mean weight gradients."""
    trace = model.forward_batch(arch, weights, x)
    ograds = model.output_grads(arch, trace.outputs, y, tau=tau)
    gs = model.backward_batch(arch, weights, trace, ograds)
    grads = model.mean_weight_grads(trace, gs)
    return trace, gs, grads


def _fisher_preacts(arch, weights, trace, gs_data, rng, tau, fisher, y):
    """Pre-activation gradients used for Fisher statistics."""
    if fisher == "empirical":
        return gs_data
    if fisher != "true":
        raise ValueError(f"fisher must be 'true' or 'empirical', got {fisher!r}")
    sampled = model.sample_targets_batch(arch, trace.outputs, tau, rng)
    ograds = model.output_grads(arch, trace.outputs, sampled, tau=tau)
    return model.backward_batch(arch, weights, trace, ograds)


def _squared_grad_vector(trace, gs) -> np.ndarray:
    """Batch mean of elementwise-squared per-example weight gradients, packed."""
    n = trace.outputs.shape[0]
    parts = []
    for a, g in zip(trace.inputs, gs):
        sq = (a**2).T @ (g**2) / n
        parts.append(sq.reshape(-1, order="F"))
    return np.concatenate(parts)


def _per_example_packed(trace, gs) -> np.ndarray:
    """Per-example packed weight gradients, one row per example.

    Row i is the concatenation over layers of vec(a_i g_i^T) in the same
    column-major order as ``model.pack_weights``.
    """
    n = trace.outputs.shape[0]
    parts = []
    for a, g in zip(trace.inputs, gs):
        parts.append(np.einsum("nj,nk->nkj", a, g).reshape(n, -1))
    return np.hstack(parts)


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


# ---------------------------------------------------------------------------
# Steps


def noisy_adam_step(
    state: NoisyAdamState,
    arch: MlpArchitecture,
    x: np.ndarray,
    y,
    rng: np.random.Generator,
    tau: float | None = None,
    fisher: str = "true",
    lr: float | None = None,
    weight_noise: bool = True,
    trust_region: "TrustRegionSchedule | None" = None,
) -> dict:
    """One noisy-Adam update; mutates ``state`` and returns step info.

    Sequence: sample weights from the intrinsically damped posterior; form
    v = data gradient - gamma_in * w; update the momentum; update the
    diagonal Fisher from squared likelihood gradients (prior term excluded);
    bias-correct the momentum only; divide by (fbar + total damping), no
    square root; ascend the mean.
    """
    p = state.posterior
    h = p.hyper
    if lr is None:
        lr = state.alpha
    if weight_noise:
        w_vec = p.mu + np.sqrt(p.variances()) * rng.standard_normal(p.mu.shape[0])
    else:
        w_vec = p.mu.copy()
    weights = post_mod._unpack(w_vec, p.shapes)

    trace, gs, grads = _data_pass(arch, weights, x, y, tau)
    grad_vec = model.pack_weights(grads)
    gs_f = _fisher_preacts(arch, weights, trace, gs, rng, tau, fisher, y)
    sq = _squared_grad_vector(trace, gs_f)
    if not _finite(grad_vec, sq):
        state.n_skipped += 1
        return {"skipped": True, "grad_norm": float("nan"), "lr": lr}

    v = grad_vec - h.gamma_in * w_vec
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * v
    p.fbar = state.beta2 * p.fbar + (1.0 - state.beta2) * sq
    state.k += 1
    m_tilde = state.m / (1.0 - state.beta1**state.k)
    m_hat = m_tilde / (p.fbar + h.gamma_total)
    if trust_region is not None:
        lr = trust_region_lr(m_hat, p.fbar + h.gamma_total, trust_region)
    p.mu = p.mu + lr * m_hat
    return {"skipped": False, "grad_norm": float(np.linalg.norm(grad_vec)), "lr": lr}


def noisy_kfac_step(
    state: NoisyKfacState,
    arch: MlpArchitecture,
    x: np.ndarray,
    y,
    rng: np.random.Generator,
    tau: float | None = None,
    fisher: str = "true",
    lr: float | None = None,
    trust_region: "TrustRegionSchedule | None" = None,
) -> dict:
    """One noisy K-FAC update; mutates ``state`` and returns step info.

    Weights are sampled with intrinsic damping; every ``t_stats`` steps the
    Kronecker factors are refreshed from minibatch second moments; every
    ``t_inv`` steps the damped inverses are recomputed; the mean update is
    preconditioned with the totally damped inverses.
    """
    p = state.posterior
    h = p.hyper
    if lr is None:
        lr = state.alpha
    k_next = state.k + 1
    weights = sample_weights(p, rng)

    trace, gs, grads = _data_pass(arch, weights, x, y, tau)
    n = trace.outputs.shape[0]
    grad_vec = model.pack_weights(grads)

    stats = None
    if k_next % state.t_stats == 0:
        gs_f = _fisher_preacts(arch, weights, trace, gs, rng, tau, fisher, y)
        stats = [
            (
                linalg.symmetrize(trace.inputs[l].T @ trace.inputs[l] / n),
                linalg.symmetrize(gs_f[l].T @ gs_f[l] / n),
            )
            for l in range(arch.n_layers)
        ]
        if not all(_finite(a_stat, s_stat) for a_stat, s_stat in stats):
            state.n_skipped += 1
            return {"skipped": True, "grad_norm": float("nan"), "lr": lr}
    if not _finite(grad_vec):
        state.n_skipped += 1
        return {"skipped": True, "grad_norm": float("nan"), "lr": lr}

    state.k = k_next
    if stats is not None:
        for layer, (a_stat, s_stat) in zip(p.layers, stats):
            layer.abar = linalg.symmetrize(
                (1.0 - state.beta_tilde) * layer.abar + state.beta_tilde * a_stat
            )
            layer.sbar = linalg.symmetrize(
                (1.0 - state.beta_tilde) * layer.sbar + state.beta_tilde * s_stat
            )
    if state.k % state.t_inv == 0:
        refresh_damped_inverses(p, use_total_damping=False)
        refresh_damped_inverses(p, use_total_damping=True)
    directions = [
        layer.step_inv_a @ (g_l - h.gamma_in * w_l) @ layer.step_inv_s
        for layer, g_l, w_l in zip(p.layers, grads, weights)
    ]
    if trust_region is not None:
        lr = trust_region_lr(
            directions, post_mod.damped_fisher(p, h.gamma_total), trust_region
        )
    for layer, direction in zip(p.layers, directions):
        layer.m = layer.m + lr * direction
    return {"skipped": False, "grad_norm": float(np.linalg.norm(grad_vec)), "lr": lr}


def noisy_full_step(
    state: NoisyFullState,
    arch: MlpArchitecture,
    x: np.ndarray,
    y,
    rng: np.random.Generator,
    tau: float | None = None,
    fisher: str = "true",
    lr: float | None = None,
    trust_region: "TrustRegionSchedule | None" = None,
) -> dict:
    """One full-covariance update; mutates ``state`` and returns step info.

    Samples w from N(mu, Lambda^-1), refreshes the dense Fisher moving
    average from per-example outer products, then takes the preconditioned
    step mu += lr (Fbar + gamma_in I)^-1 (data gradient - gamma_in w).
    """
    p = state.posterior
    h = p.hyper
    if lr is None:
        lr = state.alpha_tilde
    cov = linalg.spd_inverse(p.precision_matrix())
    w_vec = linalg.sample_gaussian(p.mu, cov, rng)
    weights = post_mod._unpack(w_vec, p.shapes)

    trace, gs, grads = _data_pass(arch, weights, x, y, tau)
    n = trace.outputs.shape[0]
    grad_vec = model.pack_weights(grads)
    gs_f = _fisher_preacts(arch, weights, trace, gs, rng, tau, fisher, y)
    packed = _per_example_packed(trace, gs_f)
    fhat = packed.T @ packed / n
    if not _finite(grad_vec, fhat):
        state.n_skipped += 1
        return {"skipped": True, "grad_norm": float("nan"), "lr": lr}

    p.fbar = linalg.symmetrize(
        (1.0 - state.beta_tilde) * p.fbar + state.beta_tilde * fhat
    )
    state.k += 1
    d = p.mu.shape[0]
    damped = p.fbar + h.gamma_in * np.eye(d)
    direction = linalg.spd_solve(damped, grad_vec - h.gamma_in * w_vec)
    if trust_region is not None:
        lr = trust_region_lr(direction, damped, trust_region)
    p.mu = p.mu + lr * direction
    return {"skipped": False, "grad_norm": float(np.linalg.norm(grad_vec)), "lr": lr}


# ---------------------------------------------------------------------------
# Fisher-norm step sizing


@dataclass
class TrustRegionSchedule:
    """Exponentially decaying budget for the squared Fisher norm of a step."""

    c0: float
    zeta: float
    alpha_max: float
    epoch: int = 0

    def __post_init__(self):
        if not (0.0 < self.zeta <= 1.0):
            raise ValueError("zeta must lie in (0, 1]")
        if self.alpha_max <= 0 or self.c0 <= 0:
            raise ValueError("c0 and alpha_max must be positive")

    @property
    def budget(self) -> float:
        return self.c0 * self.zeta**self.epoch

    def advance_epoch(self) -> None:
        self.epoch += 1


def trust_region_lr(v, fisher_rep, schedule: TrustRegionSchedule) -> float:
    """Step size min(alpha_max, sqrt(c_k / v^T F v)) for the current budget.

    ``fisher_rep`` may be a diagonal vector, a dense matrix, or a list of
    per-layer Kronecker pairs (with ``v`` a matching list of matrices).
    A nonpositive quadratic form falls back to ``alpha_max``.
    """
    if isinstance(fisher_rep, list):
        quad = sum(
            linalg.kron_quadratic_form(pair, v_l) for pair, v_l in zip(fisher_rep, v)
        )
    else:
        fisher_rep = np.asarray(fisher_rep)
        v = np.asarray(v)
        if fisher_rep.ndim == 1:
            quad = float(np.sum(fisher_rep * v**2))
        else:
            quad = float(v @ fisher_rep @ v)
    if quad <= 0.0:
        return schedule.alpha_max
    return float(min(schedule.alpha_max, np.sqrt(schedule.budget / quad)))


# ---------------------------------------------------------------------------
# Noise-precision updates


def gamma_tau_step(
    q_tau: GammaPosterior,
    p,
    arch: MlpArchitecture,
    x: np.ndarray,
    y,
    rng: np.random.Generator,
    lr: float,
    prior: GammaPosterior,
) -> GammaPosterior:
    """One gradient-ascent step on the noise-precision terms of the objective.

    The objective is N times the batch-mean expected Gaussian log-likelihood
    under tau ~ Gamma(alpha, beta) minus KL to the Gamma prior; the ascent
    runs in (log alpha, log beta) space so both parameters stay positive.
    """
    from scipy.special import polygamma

    a, b = q_tau.alpha, q_tau.beta
    a0, b0 = prior.alpha, prior.beta
    n_total = p.hyper.n_train

    weights = sample_weights(p, rng)
    outputs = model.forward_batch(arch, weights, x).outputs
    resid = model._as_targets(arch, y) - outputs
    k_out = outputs.shape[1]
    r2 = float(np.mean(np.sum(resid**2, axis=1)))

    trigamma = float(polygamma(1, a))
    d_alpha = n_total * 0.5 * (k_out * trigamma - r2 / b)
    d_beta = n_total * 0.5 * (-k_out / b + a * r2 / b**2)
    d_alpha -= (a - a0) * trigamma + (b0 - b) / b
    d_beta -= a0 / b - a * b0 / b**2

    # Chain rule into log space keeps alpha, beta > 0 for any finite gradient;
    # the per-step log change is capped so the multiplicative update stays finite.
    g_log_a = a * d_alpha
    g_log_b = b * d_beta
    if not (np.isfinite(g_log_a) and np.isfinite(g_log_b)):
        return q_tau
    step_a = float(np.clip(lr * g_log_a, -10.0, 10.0))
    step_b = float(np.clip(lr * g_log_b, -10.0, 10.0))
    return GammaPosterior(alpha=a * np.exp(step_a), beta=b * np.exp(step_b))
