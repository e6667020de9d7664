"""Gaussian variational families parameterized through Fisher moving averages.

Three families over network weights share one convention: the posterior
covariance is the inverse of ``(N / lam) * Fbar + eta^-1 I`` where ``Fbar``
is an exponential moving average of (approximate) Fisher information and
the identity term comes from the spherical prior N(0, eta I). The prior
contributes an "intrinsic" damping ``gamma_in = lam / (N eta)`` to the
moving average; optional extra damping ``gamma_ex`` stabilizes parameter
updates but never widens the sampling distribution.

Families:

* ``FfgPosterior``   - fully factorized; diagonal Fisher vector ``fbar``.
* ``MvgPosterior``   - per-layer matrix-variate Gaussian; Kronecker factors
  ``abar`` (input-activation second moments) and ``sbar`` (pre-activation
  gradient second moments). Damping is split between the two factors by a
  trace-matched coefficient ``pi`` so that the identity contributions
  multiply back to the requested scalar damping.
* ``FullPosterior``  - one dense Fisher moving average over all weights.

A Gamma posterior over the observation noise precision rides along for
regression likelihoods.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from . import linalg, model
from .linalg import KroneckerPair, NotPositiveDefinite  # noqa: F401  (re-export)
from .model import MlpArchitecture


@dataclass(frozen=True)
class Hyper:
    """KL weight, training-set size, prior variance and extrinsic damping."""

    lam: float
    n_train: int
    eta: float
    gamma_ex: float = 0.0

    def __post_init__(self):
        if self.lam <= 0 or self.eta <= 0:
            raise ValueError("lam and eta must be positive")
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.gamma_ex < 0:
            raise ValueError("gamma_ex must be >= 0")

    @property
    def gamma_in(self) -> float:
        """Prior-induced damping lam / (N eta); derived, never stored."""
        return self.lam / (self.n_train * self.eta)

    @property
    def gamma_total(self) -> float:
        return self.gamma_in + self.gamma_ex

    @property
    def scale(self) -> float:
        """The lam / N factor multiplying inverse-Fisher covariances."""
        return self.lam / self.n_train

    def to_dict(self) -> dict:
        return {
            "lam": self.lam,
            "n_train": self.n_train,
            "eta": self.eta,
            "gamma_ex": self.gamma_ex,
        }


@dataclass
class GammaPosterior:
    """Variational Gamma(shape alpha, rate beta) over the noise precision."""

    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Gamma parameters must be strictly positive")

    @property
    def mean(self) -> float:
        return self.alpha / self.beta


@dataclass
class FfgPosterior:
    mu: np.ndarray
    fbar: np.ndarray
    hyper: Hyper
    shapes: list

    def variances(self) -> np.ndarray:
        """Per-weight variance (lam/N) / (fbar + gamma_in)."""
        return self.hyper.scale / (self.fbar + self.hyper.gamma_in)


@dataclass
class MvgLayer:
    """One layer's matrix-variate posterior and its damped-inverse caches."""

    m: np.ndarray
    abar: np.ndarray
    sbar: np.ndarray
    pi: float = 1.0
    # Caches at intrinsic damping (weight sampling) and total damping (steps).
    sample_inv_a: np.ndarray | None = None
    sample_inv_s: np.ndarray | None = None
    row_chol: np.ndarray | None = None
    col_chol: np.ndarray | None = None
    step_inv_a: np.ndarray | None = None
    step_inv_s: np.ndarray | None = None


@dataclass
class MvgPosterior:
    layers: list
    hyper: Hyper


@dataclass
class FullPosterior:
    mu: np.ndarray
    fbar: np.ndarray
    hyper: Hyper
    shapes: list

    def precision_matrix(self) -> np.ndarray:
        n_over_lam = 1.0 / self.hyper.scale
        d = self.mu.shape[0]
        return linalg.symmetrize(n_over_lam * self.fbar + np.eye(d) / self.hyper.eta)


# ---------------------------------------------------------------------------
# Construction


def init_ffg(arch: MlpArchitecture, hyper: Hyper, rng: np.random.Generator) -> FfgPosterior:
    mu = model.pack_weights(model.init_weights(arch, rng))
    return FfgPosterior(
        mu=mu, fbar=np.zeros_like(mu), hyper=hyper, shapes=arch.weight_shapes
    )


def init_mvg(arch: MlpArchitecture, hyper: Hyper, rng: np.random.Generator) -> MvgPosterior:
    layers = []
    for w in model.init_weights(arch, rng):
        p, q = w.shape
        layers.append(MvgLayer(m=w, abar=np.zeros((p, p)), sbar=np.zeros((q, q))))
    post = MvgPosterior(layers=layers, hyper=hyper)
    refresh_damped_inverses(post, use_total_damping=False)
    refresh_damped_inverses(post, use_total_damping=True)
    return post


def init_full(arch: MlpArchitecture, hyper: Hyper, rng: np.random.Generator) -> FullPosterior:
    mu = model.pack_weights(model.init_weights(arch, rng))
    d = mu.shape[0]
    return FullPosterior(
        mu=mu, fbar=np.zeros((d, d)), hyper=hyper, shapes=arch.weight_shapes
    )


# ---------------------------------------------------------------------------
# Damping helpers


def _pi_rule(abar: np.ndarray, sbar: np.ndarray) -> float:
    """Trace-matched split of a scalar damping between the two factors.

    pi = sqrt(mean-eigenvalue ratio), clamped to [1e-3, 1e3]; falls back to
    1 when either factor is numerically zero.
    """
    ta = float(np.trace(abar)) / abar.shape[0]
    ts = float(np.trace(sbar)) / sbar.shape[0]
    if ta < 1e-12 or ts < 1e-12:
        return 1.0
    return float(np.clip(np.sqrt(ta / ts), 1e-3, 1e3))


def damped_factors(layer: MvgLayer, gamma: float, pi: float | None = None):
    """The damped Kronecker factors (abar + pi sqrt(gamma) I, sbar + sqrt(gamma)/pi I).

    The two identity contributions multiply to exactly ``gamma``, so for
    zero statistics the implied precision reduces to ``gamma * I``.
    """
    if pi is None:
        pi = _pi_rule(layer.abar, layer.sbar)
    root = np.sqrt(gamma)
    a_damped = layer.abar + pi * root * np.eye(layer.abar.shape[0])
    s_damped = layer.sbar + (root / pi) * np.eye(layer.sbar.shape[0])
    return a_damped, s_damped, pi


def refresh_damped_inverses(p: MvgPosterior, use_total_damping: bool) -> None:
    """Recompute per-layer damped inverses (and sampling Cholesky factors).

    ``use_total_damping=False`` refreshes the caches used for weight
    sampling (intrinsic damping only); ``True`` refreshes the caches used
    by parameter updates (intrinsic + extrinsic).
    """
    gamma = p.hyper.gamma_total if use_total_damping else p.hyper.gamma_in
    for layer in p.layers:
        a_damped, s_damped, pi = damped_factors(layer, gamma)
        layer.pi = pi
        inv_a = linalg.spd_inverse(a_damped)
        inv_s = linalg.spd_inverse(s_damped)
        if use_total_damping:
            layer.step_inv_a, layer.step_inv_s = inv_a, inv_s
        else:
            layer.sample_inv_a, layer.sample_inv_s = inv_a, inv_s
            layer.row_chol = linalg.cholesky(p.hyper.scale * inv_a)
            layer.col_chol = linalg.cholesky(inv_s)


# ---------------------------------------------------------------------------
# Sampling


def sample_weights(p, rng: np.random.Generator) -> list:
    """Draw one weight set from the variational posterior."""
    if isinstance(p, FfgPosterior):
        w = p.mu + np.sqrt(p.variances()) * rng.standard_normal(p.mu.shape[0])
        return _unpack(w, p.shapes)
    if isinstance(p, MvgPosterior):
        out = []
        for layer in p.layers:
            if layer.row_chol is None or layer.col_chol is None:
                raise RuntimeError("sampling caches are stale; call refresh_damped_inverses")
            out.append(linalg.sample_mvg_chol(layer.m, layer.row_chol, layer.col_chol, rng))
        return out
    if isinstance(p, FullPosterior):
        cov = linalg.spd_inverse(p.precision_matrix())
        w = linalg.sample_gaussian(p.mu, cov, rng)
        return _unpack(w, p.shapes)
    raise TypeError(f"unknown posterior type {type(p).__name__}")


def _unpack(vector: np.ndarray, shapes: list) -> list:
    out, offset = [], 0
    for pq in shapes:
        size = pq[0] * pq[1]
        out.append(vector[offset : offset + size].reshape(pq, order="F"))
        offset += size
    return out


def mean_weights(p) -> list:
    """The posterior mean as a weight set."""
    if isinstance(p, FfgPosterior) or isinstance(p, FullPosterior):
        return _unpack(p.mu, p.shapes)
    if isinstance(p, MvgPosterior):
        return [layer.m.copy() for layer in p.layers]
    raise TypeError(f"unknown posterior type {type(p).__name__}")


# ---------------------------------------------------------------------------
# Precision and divergences


def precision(p):
    """Implied posterior precision in the family's natural representation.

    Fully factorized: a vector. Matrix-variate: one Kronecker pair per
    layer with scale N/lam. Full: a dense matrix.
    """
    if isinstance(p, FfgPosterior):
        return (p.fbar + p.hyper.gamma_in) / p.hyper.scale
    if isinstance(p, MvgPosterior):
        pairs = []
        for layer in p.layers:
            a_damped, s_damped, _ = damped_factors(layer, p.hyper.gamma_in)
            pairs.append(
                KroneckerPair(left=s_damped, right=a_damped, scale=1.0 / p.hyper.scale)
            )
        return pairs
    if isinstance(p, FullPosterior):
        return p.precision_matrix()
    raise TypeError(f"unknown posterior type {type(p).__name__}")


def damped_fisher(p, gamma: float):
    """Damped Fisher representation (Fbar + gamma I analogue) per family.

    Used for Fisher-norm step sizing; same structure as :func:`precision`
    but without the N/lam scale and at an arbitrary damping.
    """
    if isinstance(p, FfgPosterior):
        return p.fbar + gamma
    if isinstance(p, MvgPosterior):
        pairs = []
        for layer in p.layers:
            a_damped, s_damped, _ = damped_factors(layer, gamma)
            pairs.append(KroneckerPair(left=s_damped, right=a_damped, scale=1.0))
        return pairs
    if isinstance(p, FullPosterior):
        return p.fbar + gamma * np.eye(p.fbar.shape[0])
    raise TypeError(f"unknown posterior type {type(p).__name__}")


def kl_to_prior(p) -> float:
    """KL(q(w) || N(0, eta I)) in closed form.

    0.5 [log(eta^d / det Sigma) - d + tr(Sigma)/eta + ||mu||^2 / eta];
    Kronecker-structured covariances contribute through factor eigenvalues.
    """
    eta = p.hyper.eta
    if isinstance(p, FfgPosterior):
        sigma2 = p.variances()
        return float(
            0.5
            * np.sum(np.log(eta / sigma2) - 1.0 + sigma2 / eta + p.mu**2 / eta)
        )
    if isinstance(p, FullPosterior):
        lam_mat = p.precision_matrix()
        d = p.mu.shape[0]
        logdet_sigma = -linalg.spd_logdet(lam_mat)
        sigma = linalg.spd_inverse(lam_mat)
        return float(
            0.5
            * (
                d * np.log(eta)
                - logdet_sigma
                - d
                + np.trace(sigma) / eta
                + p.mu @ p.mu / eta
            )
        )
    if isinstance(p, MvgPosterior):
        total = 0.0
        for layer in p.layers:
            a_damped, s_damped, _ = damped_factors(layer, p.hyper.gamma_in)
            ea = np.linalg.eigvalsh(a_damped)
            es = np.linalg.eigvalsh(s_damped)
            if np.any(ea <= 0) or np.any(es <= 0):
                raise NotPositiveDefinite("damped Kronecker factor has a nonpositive eigenvalue")
            rows, cols = layer.m.shape
            d_l = rows * cols
            logdet_sigma = (
                d_l * np.log(p.hyper.scale)
                - cols * np.sum(np.log(ea))
                - rows * np.sum(np.log(es))
            )
            tr_sigma = p.hyper.scale * np.sum(1.0 / ea) * np.sum(1.0 / es)
            total += 0.5 * (
                d_l * np.log(eta)
                - logdet_sigma
                - d_l
                + tr_sigma / eta
                + np.sum(layer.m**2) / eta
            )
        return float(total)
    raise TypeError(f"unknown posterior type {type(p).__name__}")


def gamma_kl(q: GammaPosterior, prior: GammaPosterior) -> float:
    """KL(Gamma(a, b) || Gamma(a0, b0)); nonnegative, zero iff equal."""
    a, b = q.alpha, q.beta
    a0, b0 = prior.alpha, prior.beta
    if min(a, b, a0, b0) <= 0:
        raise ValueError("Gamma parameters must be positive")
    return float(
        (a - a0) * digamma(a)
        - gammaln(a)
        + gammaln(a0)
        + a0 * (np.log(b) - np.log(b0))
        + a * (b0 - b) / b
    )


def elbo_estimate(
    p,
    arch: MlpArchitecture,
    x: np.ndarray,
    y,
    rng: np.random.Generator,
    num_samples: int = 8,
    q_tau: GammaPosterior | None = None,
    tau: float | None = None,
    tau_prior: GammaPosterior | None = None,
) -> float:
    """Monte Carlo evidence lower bound for the whole training set.

    The likelihood term is the per-example mean over the supplied batch,
    scaled by N, averaged over ``num_samples`` weight draws; the weight KL
    is weighted by lam, and the Gamma KL is included when a noise posterior
    is being learned.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("empty data")
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    ll = 0.0
    for _ in range(num_samples):
        weights = sample_weights(p, rng)
        outputs = model.forward_batch(arch, weights, x).outputs
        if arch.likelihood == "gaussian" and q_tau is not None:
            resid = model._as_targets(arch, y) - outputs
            per_ex = 0.5 * np.sum(
                digamma(q_tau.alpha)
                - np.log(q_tau.beta)
                - q_tau.mean * resid**2
                - model.LOG_2PI,
                axis=1,
            )
            ll += float(np.mean(per_ex))
        else:
            ll += model.batch_log_likelihood(arch, outputs, y, tau=tau)
    ll /= num_samples
    elbo = p.hyper.n_train * ll - p.hyper.lam * kl_to_prior(p)
    if q_tau is not None and tau_prior is not None:
        elbo -= gamma_kl(q_tau, tau_prior)
    return float(elbo)


def intrinsic_reward(
    p: MvgPosterior,
    mu_grads: list,
    sigma1_grads: list | None,
    sigma2_grads: list | None,
    step_size: float,
) -> float:
    """KL divergence between successive posteriors after one natural-gradient step.

    0.5 * step_size^2 times the squared natural-gradient norm, computed
    blockwise per layer: the mean block uses the Kronecker covariance as
    the inverse metric, and each covariance-factor block uses the closed
    form (2/k) <G, Sigma G Sigma> for its own factor, ignoring the
    off-diagonal coupling between the two factors.
    """
    if sigma1_grads is None:
        sigma1_grads = [None] * len(p.layers)
    if sigma2_grads is None:
        sigma2_grads = [None] * len(p.layers)
    if not (len(mu_grads) == len(sigma1_grads) == len(sigma2_grads) == len(p.layers)):
        raise ValueError("need one gradient block per layer")
    total = 0.0
    for layer, g_mu, g_s1, g_s2 in zip(p.layers, mu_grads, sigma1_grads, sigma2_grads):
        if layer.sample_inv_a is None or layer.sample_inv_s is None:
            raise RuntimeError("sampling caches are stale; call refresh_damped_inverses")
        sigma1 = p.hyper.scale * layer.sample_inv_a  # row covariance
        sigma2 = layer.sample_inv_s  # column covariance
        rows, cols = layer.m.shape
        g_mu = np.asarray(g_mu, dtype=float)
        if g_mu.shape != layer.m.shape:
            raise ValueError(f"mean gradient is {g_mu.shape}, layer is {layer.m.shape}")
        total += kron_quad(sigma2, sigma1, g_mu)
        if g_s1 is not None:
            g_s1 = np.asarray(g_s1, dtype=float)
            total += (2.0 / cols) * float(np.sum(g_s1 * (sigma1 @ g_s1 @ sigma1)))
        if g_s2 is not None:
            g_s2 = np.asarray(g_s2, dtype=float)
            total += (2.0 / rows) * float(np.sum(g_s2 * (sigma2 @ g_s2 @ sigma2)))
    return 0.5 * step_size**2 * total


def kron_quad(left: np.ndarray, right: np.ndarray, v: np.ndarray) -> float:
    return linalg.kron_quadratic_form(KroneckerPair(left=left, right=right, scale=1.0), v)


# ---------------------------------------------------------------------------
# Checkpointing


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(d["shape"]).copy()


FAMILY_TAGS = {FfgPosterior: "ffg", MvgPosterior: "mvg", FullPosterior: "full"}


def checkpoint_document(
    p,
    step: int = 0,
    seed: int | None = None,
    arch: MlpArchitecture | None = None,
    q_tau: GammaPosterior | None = None,
    extra: dict | None = None,
) -> dict:
    """Self-describing checkpoint document; arrays are exact float64 bytes."""
    family = FAMILY_TAGS.get(type(p))
    if family is None:
        raise TypeError(f"unknown posterior type {type(p).__name__}")
    doc = {
        "format": "nngrad-checkpoint-v1",
        "family": family,
        "hyper": p.hyper.to_dict(),
        "step": int(step),
        "seed": None if seed is None else int(seed),
        "arch": None if arch is None else arch.to_dict(),
        "gamma_posterior": None
        if q_tau is None
        else {"alpha": q_tau.alpha, "beta": q_tau.beta},
        "extra": extra or {},
    }
    if family == "ffg":
        doc["arrays"] = {"mu": _encode_array(p.mu), "fbar": _encode_array(p.fbar)}
        doc["shapes"] = [list(s) for s in p.shapes]
    elif family == "full":
        doc["arrays"] = {"mu": _encode_array(p.mu), "fbar": _encode_array(p.fbar)}
        doc["shapes"] = [list(s) for s in p.shapes]
    else:
        doc["layers"] = [
            {
                "m": _encode_array(layer.m),
                "abar": _encode_array(layer.abar),
                "sbar": _encode_array(layer.sbar),
            }
            for layer in p.layers
        ]
    return doc


def save_checkpoint(path, p, **kwargs) -> None:
    doc = checkpoint_document(p, **kwargs)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass
class Checkpoint:
    posterior: object
    step: int
    seed: int | None
    arch: MlpArchitecture | None
    q_tau: GammaPosterior | None
    extra: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "nngrad-checkpoint-v1":
        raise ValueError(f"not a recognized checkpoint: {path}")
    hyper = Hyper(**doc["hyper"])
    family = doc["family"]
    if family in ("ffg", "full"):
        mu = _decode_array(doc["arrays"]["mu"])
        fbar = _decode_array(doc["arrays"]["fbar"])
        shapes = [tuple(s) for s in doc["shapes"]]
        cls = FfgPosterior if family == "ffg" else FullPosterior
        post = cls(mu=mu, fbar=fbar, hyper=hyper, shapes=shapes)
    elif family == "mvg":
        layers = [
            MvgLayer(
                m=_decode_array(rec["m"]),
                abar=_decode_array(rec["abar"]),
                sbar=_decode_array(rec["sbar"]),
            )
            for rec in doc["layers"]
        ]
        post = MvgPosterior(layers=layers, hyper=hyper)
        refresh_damped_inverses(post, use_total_damping=False)
        refresh_damped_inverses(post, use_total_damping=True)
    else:
        raise ValueError(f"unknown family tag {family!r}")
    q_tau = None
    if doc.get("gamma_posterior"):
        q_tau = GammaPosterior(**doc["gamma_posterior"])
    arch = None
    if doc.get("arch"):
        arch = MlpArchitecture.from_dict(doc["arch"])
    return Checkpoint(
        posterior=post,
        step=doc.get("step", 0),
        seed=doc.get("seed"),
        arch=arch,
        q_tau=q_tau,
        extra=doc.get("extra", {}),
    )
