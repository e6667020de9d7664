"""Noisy natural-gradient variational inference for Bayesian neural networks.

Trains Gaussian variational posteriors over network weights by adding
adaptive weight noise to natural-gradient point optimizers: a diagonal
(noisy Adam), Kronecker-factored (noisy K-FAC) and dense full-covariance
variant, together with conjugate/HMC/finite-difference oracles and a
regression, calibration and active-learning benchmark harness.
"""

from .linalg import KroneckerPair, NotPositiveDefinite
from .model import MlpArchitecture
from .posterior import (
    FfgPosterior,
    FullPosterior,
    GammaPosterior,
    Hyper,
    MvgPosterior,
    elbo_estimate,
    gamma_kl,
    intrinsic_reward,
    kl_to_prior,
    load_checkpoint,
    precision,
    refresh_damped_inverses,
    sample_weights,
    save_checkpoint,
)
from .optim import (
    NoisyAdamState,
    NoisyFullState,
    NoisyKfacState,
    TrustRegionSchedule,
    gamma_tau_step,
    init_noisy_adam,
    init_noisy_full,
    init_noisy_kfac,
    noisy_adam_step,
    noisy_full_step,
    noisy_kfac_step,
    trust_region_lr,
)
from .training import FitResult, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "KroneckerPair",
    "NotPositiveDefinite",
    "MlpArchitecture",
    "FfgPosterior",
    "FullPosterior",
    "GammaPosterior",
    "Hyper",
    "MvgPosterior",
    "elbo_estimate",
    "gamma_kl",
    "intrinsic_reward",
    "kl_to_prior",
    "load_checkpoint",
    "precision",
    "refresh_damped_inverses",
    "sample_weights",
    "save_checkpoint",
    "NoisyAdamState",
    "NoisyFullState",
    "NoisyKfacState",
    "TrustRegionSchedule",
    "gamma_tau_step",
    "init_noisy_adam",
    "init_noisy_full",
    "init_noisy_kfac",
    "noisy_adam_step",
    "noisy_full_step",
    "noisy_kfac_step",
    "trust_region_lr",
    "FitResult",
    "TrainConfig",
    "fit",
]
