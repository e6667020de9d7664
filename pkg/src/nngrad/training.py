"""Minibatch training driver shared by the benchmark protocols and the CLI.

Runs one of the three noisy natural-gradient methods for a fixed number of
epochs, optionally learning a Gamma posterior over the Gaussian noise
precision alongside the weights. Emits line-delimited step records (step
index, evidence bound estimate, step size, gradient norm, wall time) at a
configurable interval.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model, optim, posterior as post_mod
from .model import MlpArchitecture
from .optim import TrustRegionSchedule
from .posterior import GammaPosterior, Hyper

METHODS = ("nng-ffg", "nng-mvg", "nng-full")


@dataclass
class TrainConfig:
    method: str = "nng-mvg"
    epochs: int = 120
    batch_size: int = 10
    alpha: float = 0.01
    beta_tilde: float = 0.001
    beta1: float = 0.9
    t_stats: int = 1
    t_inv: int = 20
    fisher: str = "true"
    learn_tau: bool = True
    tau: float = 1.0  # fixed noise precision when learn_tau is off
    tau_prior: tuple = (6.0, 6.0)
    tau_lr: float = 1e-5
    lr_decay_at_half: bool = True
    warmup_batches: int = 10
    trust_region: TrustRegionSchedule | None = None
    log_every: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.fisher not in ("true", "empirical"):
            raise ValueError("fisher must be 'true' or 'empirical'")


@dataclass
class FitResult:
    state: object
    q_tau: GammaPosterior | None
    records: list = field(default_factory=list)
    n_skipped: int = 0

    @property
    def posterior(self):
        return self.state.posterior


def _init_state(arch, hyper, cfg: TrainConfig, rng):
    if cfg.method == "nng-ffg":
        return optim.init_noisy_adam(
            arch, hyper, rng, alpha=cfg.alpha, beta1=cfg.beta1, beta2=1.0 - cfg.beta_tilde
        )
    if cfg.method == "nng-mvg":
        return optim.init_noisy_kfac(
            arch,
            hyper,
            rng,
            alpha=cfg.alpha,
            beta_tilde=cfg.beta_tilde,
            t_stats=cfg.t_stats,
            t_inv=cfg.t_inv,
        )
    return optim.init_noisy_full(
        arch, hyper, rng, alpha_tilde=cfg.alpha, beta_tilde=cfg.beta_tilde
    )


def _step(state, arch, bx, by, rng, tau, cfg: TrainConfig):
    kwargs = dict(tau=tau, fisher=cfg.fisher, trust_region=cfg.trust_region)
    if isinstance(state, optim.NoisyAdamState):
        return optim.noisy_adam_step(state, arch, bx, by, rng, **kwargs)
    if isinstance(state, optim.NoisyKfacState):
        return optim.noisy_kfac_step(state, arch, bx, by, rng, **kwargs)
    return optim.noisy_full_step(state, arch, bx, by, rng, **kwargs)


def _decay_lr(state, factor: float) -> None:
    if isinstance(state, optim.NoisyFullState):
        state.alpha_tilde *= factor
    else:
        state.alpha *= factor


def _warmup_fisher(state, arch, x, y, rng, tau, cfg: TrainConfig) -> None:
    """Prime the Fisher moving averages by plain averaging before stepping.

    With zero-initialized statistics the first preconditioned steps divide
    by the damping alone, which can be violently large; a few batches of
    statistics collected at the initial posterior avoid that transient.
    """
    n = x.shape[0]
    p = state.posterior
    acc = None
    count = 0
    for _ in range(cfg.warmup_batches):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        weights = post_mod.sample_weights(p, rng)
        trace = model.forward_batch(arch, weights, x[idx])
        gs_data = model.backward_batch(
            arch, weights, trace, model.output_grads(arch, trace.outputs, y[idx], tau=tau)
        )
        gs = optim._fisher_preacts(arch, weights, trace, gs_data, rng, tau, cfg.fisher, y[idx])
        nb = trace.outputs.shape[0]
        if isinstance(state, optim.NoisyAdamState):
            stat = optim._squared_grad_vector(trace, gs)
        elif isinstance(state, optim.NoisyFullState):
            packed = optim._per_example_packed(trace, gs)
            stat = packed.T @ packed / nb
        else:
            stat = [
                (trace.inputs[l].T @ trace.inputs[l] / nb, gs[l].T @ gs[l] / nb)
                for l in range(arch.n_layers)
            ]
        if acc is None:
            acc = stat
        elif isinstance(stat, list):
            acc = [(a0 + a1, s0 + s1) for (a0, s0), (a1, s1) in zip(acc, stat)]
        else:
            acc = acc + stat
        count += 1
    if count == 0:
        return
    if isinstance(state, optim.NoisyAdamState):
        p.fbar = acc / count
    elif isinstance(state, optim.NoisyFullState):
        from .linalg import symmetrize

        p.fbar = symmetrize(acc / count)
    else:
        from .linalg import symmetrize

        for layer, (a_stat, s_stat) in zip(p.layers, acc):
            layer.abar = symmetrize(a_stat / count)
            layer.sbar = symmetrize(s_stat / count)
        post_mod.refresh_damped_inverses(p, use_total_damping=False)
        post_mod.refresh_damped_inverses(p, use_total_damping=True)


def fit(
    arch: MlpArchitecture,
    x: np.ndarray,
    y,
    hyper: Hyper,
    cfg: TrainConfig,
    rng: np.random.Generator,
    step_writer=None,
) -> FitResult:
    """Train one model; returns the final state, noise posterior and step log.

    ``step_writer`` is an optional open text file; each logged record is
    written as one JSON line.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if arch.likelihood == "categorical" and cfg.learn_tau:
        cfg = replace(cfg, learn_tau=False)

    state = _init_state(arch, hyper, cfg, rng)
    learn_tau = cfg.learn_tau and arch.likelihood == "gaussian"
    prior = GammaPosterior(*cfg.tau_prior) if learn_tau else None
    q_tau = GammaPosterior(*cfg.tau_prior) if learn_tau else None

    def current_tau():
        if arch.likelihood == "categorical":
            return None
        return q_tau.mean if learn_tau else cfg.tau

    if cfg.warmup_batches > 0:
        _warmup_fisher(state, arch, x, y, rng, current_tau(), cfg)

    result = FitResult(state=state, q_tau=q_tau)
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_at_half and cfg.epochs > 1 and epoch == cfg.epochs // 2:
            _decay_lr(state, 0.1)
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            bx, by = x[idx], y[idx]
            info = _step(state, arch, bx, by, rng, current_tau(), cfg)
            if learn_tau:
                q_tau = optim.gamma_tau_step(
                    q_tau, state.posterior, arch, bx, by, rng, cfg.tau_lr, prior
                )
                result.q_tau = q_tau
            step += 1
            if cfg.log_every and step % cfg.log_every == 0:
                elbo = post_mod.elbo_estimate(
                    state.posterior,
                    arch,
                    bx,
                    by,
                    rng,
                    num_samples=1,
                    q_tau=q_tau,
                    tau=None if arch.likelihood == "categorical" else current_tau(),
                    tau_prior=prior,
                )
                rec = {
                    "step": step,
                    "elbo": elbo,
                    "step_size": info["lr"],
                    "grad_norm": info["grad_norm"],
                    "wall_time": time.perf_counter() - t0,
                }
                result.records.append(rec)
                if step_writer is not None:
                    step_writer.write(json.dumps(rec) + "\n")
        if cfg.trust_region is not None:
            cfg.trust_region.advance_epoch()
    result.n_skipped = state.n_skipped
    return result
