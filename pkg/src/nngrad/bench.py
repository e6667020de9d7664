"""Evaluation metrics and benchmark protocols.

Protocols: repeated-split regression benchmarking (test RMSE and predictive
log-likelihood on the raw target scale), correlation of each method's
predictive variances against Hamiltonian Monte Carlo ground truth, and
pool-based active learning driven by predictive variance. Expected
calibration error is provided for classification-style outputs.

All randomness is derived from explicit seeds by spawning, so identical
seeds give identical splits, acquisitions and metric values; independent
splits may be evaluated by parallel workers without changing results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
from scipy.special import logsumexp

from . import model, oracle, posterior as post_mod, training
from .data import Dataset, Normalizer, SplitSpec, make_splits
from .model import MlpArchitecture
from .oracle import HmcConfig
from .posterior import GammaPosterior, Hyper
from .training import TrainConfig


# ---------------------------------------------------------------------------
# Metrics


def rmse(predictions: np.ndarray, targets: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape[0] == 0:
        raise ValueError("empty test set")
    return float(np.sqrt(np.mean((predictions - targets) ** 2)))


def predict_samples(
    arch: MlpArchitecture, p, x: np.ndarray, num_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """(num_samples, n) matrix of predicted means for a single-output net."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty((num_samples, x.shape[0]))
    for s in range(num_samples):
        weights = post_mod.sample_weights(p, rng)
        out[s] = model.forward_batch(arch, weights, x).outputs[:, 0]
    return out


def test_log_likelihood(
    arch: MlpArchitecture,
    p,
    x_raw: np.ndarray,
    y_raw: np.ndarray,
    normalizer: Normalizer,
    num_samples: int,
    rng: np.random.Generator,
    q_tau: GammaPosterior | None = None,
    tau: float | None = None,
) -> float:
    """Mean per-point log predictive density on the raw target scale.

    The predictive is the equally weighted mixture over sampled weights of
    Gaussians centered on the denormalized predicted means, with the point
    noise precision tau (or alpha/beta of the learned Gamma posterior)
    mapped back to raw units.
    """
    if num_samples < 1:
        raise ValueError("need at least one weight sample")
    y_raw = np.asarray(y_raw, dtype=float).reshape(-1)
    if y_raw.shape[0] == 0:
        raise ValueError("empty test set")
    tau_point = q_tau.mean if q_tau is not None else tau
    if tau_point is None or tau_point <= 0:
        raise ValueError("need a positive noise precision")
    preds = predict_samples(arch, p, normalizer.transform_features(x_raw), num_samples, rng)
    preds = normalizer.denorm_predictions(preds)
    var_raw = normalizer.target_std**2 / tau_point
    log_norm = -0.5 * (np.log(2.0 * np.pi * var_raw))
    log_terms = log_norm - 0.5 * (y_raw[None, :] - preds) ** 2 / var_raw
    per_point = logsumexp(log_terms, axis=0) - np.log(num_samples)
    return float(np.mean(per_point))


def predictive_variance(
    arch: MlpArchitecture,
    p,
    x: np.ndarray,
    num_samples: int,
    rng: np.random.Generator,
    normalizer: Normalizer | None = None,
) -> np.ndarray:
    """Variance of predicted means across sampled weights, per input point.

    This is the epistemic component only; the shared observation-noise
    variance is omitted since it cannot change any comparison or argmax
    over points. Scaled to raw target units when a normalizer is given.
    """
    if num_samples < 2:
        raise ValueError("need at least two weight samples for a variance")
    preds = predict_samples(arch, p, x, num_samples, rng)
    var = preds.var(axis=0)
    if normalizer is not None:
        var = normalizer.denorm_variance(var)
    return var


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson correlation; rejects constant inputs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ValueError("need two equal-length vectors of length >= 2")
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson correlation is undefined for constant input")
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def ece(confidences: np.ndarray, correct: np.ndarray, num_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins."""
    confidences = np.asarray(confidences, dtype=float)
    correct = np.asarray(correct, dtype=float)
    if confidences.shape[0] == 0:
        raise ValueError("empty input")
    if confidences.shape != correct.shape:
        raise ValueError("confidences and outcomes must align")
    if np.any(confidences < 0.0) or np.any(confidences > 1.0):
        raise ValueError("confidences must lie in [0, 1]")
    bins = np.clip((confidences * num_bins).astype(int), 0, num_bins - 1)
    total = confidences.shape[0]
    value = 0.0
    for b in range(num_bins):
        mask = bins == b
        n_b = int(mask.sum())
        if n_b == 0:
            continue
        value += (n_b / total) * abs(correct[mask].mean() - confidences[mask].mean())
    return float(value)


def aggregate(values: list) -> dict:
    """Mean and standard error (None with fewer than two repeats)."""
    arr = np.asarray(values, dtype=float)
    out = {"mean": float(arr.mean()), "per_split": [float(v) for v in arr]}
    out["stderr"] = (
        float(arr.std(ddof=1) / np.sqrt(arr.shape[0])) if arr.shape[0] >= 2 else None
    )
    return out


# ---------------------------------------------------------------------------
# Regression benchmark protocol


def _fit_split(
    dataset: Dataset,
    train_idx: np.ndarray,
    arch: MlpArchitecture,
    hyper_args: dict,
    cfg: TrainConfig,
    rng: np.random.Generator,
):
    norm = Normalizer.fit(dataset.features[train_idx], dataset.targets[train_idx])
    x_tr = norm.transform_features(dataset.features[train_idx])
    y_tr = norm.transform_targets(dataset.targets[train_idx])
    hyper = Hyper(n_train=train_idx.shape[0], **hyper_args)
    result = training.fit(arch, x_tr, y_tr, hyper, cfg, rng)
    return norm, result


def regression_benchmark(
    dataset: Dataset,
    method: str,
    split_spec: SplitSpec,
    train_cfg: TrainConfig,
    hidden_units: int = 50,
    activation: str = "relu",
    eval_samples: int = 1000,
    lam: float = 1.0,
    eta: float = 1.0,
    gamma_ex: float = 0.0,
    seed: int = 0,
    workers: int = 1,
) -> dict:
    """Repeated-split training and evaluation; returns metrics and artifacts.

    Metrics (RMSE and predictive log-likelihood) are reported per split and
    aggregated as mean with standard error over splits.
    """
    splits = make_splits(dataset.n, split_spec)
    arch = MlpArchitecture(
        (dataset.n_features, hidden_units, 1), activation=activation, likelihood="gaussian"
    )
    hyper_args = {"lam": lam, "eta": eta, "gamma_ex": gamma_ex}
    seeds = np.random.SeedSequence(seed).spawn(len(splits))
    cfg = replace(train_cfg, method=method)

    def run_split(i: int) -> dict:
        rng = np.random.default_rng(seeds[i])
        train_idx, test_idx = splits[i]
        norm, result = _fit_split(dataset, train_idx, arch, hyper_args, cfg, rng)
        x_te = dataset.features[test_idx]
        y_te = dataset.targets[test_idx]
        preds = predict_samples(
            arch, result.posterior, norm.transform_features(x_te), eval_samples, rng
        )
        pred_mean = norm.denorm_predictions(preds).mean(axis=0)
        ll = test_log_likelihood(
            arch,
            result.posterior,
            x_te,
            y_te,
            norm,
            eval_samples,
            rng,
            q_tau=result.q_tau,
            tau=None if result.q_tau is not None else cfg.tau,
        )
        return {
            "split": i,
            "rmse": rmse(pred_mean, y_te),
            "loglik": ll,
            "tau_mean": None if result.q_tau is None else result.q_tau.mean,
            "n_skipped": result.n_skipped,
            "artifact": (result.posterior, result.q_tau, norm),
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_split, range(len(splits))))
    else:
        records = [run_split(i) for i in range(len(splits))]
    records.sort(key=lambda r: r["split"])
    artifacts = [r.pop("artifact") for r in records]
    return {
        "arch": arch.to_dict(),
        "per_split": records,
        "rmse": aggregate([r["rmse"] for r in records]),
        "loglik": aggregate([r["loglik"] for r in records]),
        "artifacts": artifacts,
    }


# ---------------------------------------------------------------------------
# Predictive-variance correlation against HMC


def bnn_log_density(arch: MlpArchitecture, x: np.ndarray, y: np.ndarray, tau: float, eta: float):
    """Log joint (up to a constant) and gradient over packed weights."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)

    def logp(w_vec: np.ndarray):
        weights = model.unpack_weights(w_vec, arch)
        trace = model.forward_batch(arch, weights, x)
        ograds = model.output_grads(arch, trace.outputs, y, tau=tau)
        gs = model.backward_batch(arch, weights, trace, ograds)
        grad = model.pack_weights(
            [trace.inputs[l].T @ gs[l] for l in range(arch.n_layers)]
        )
        grad -= w_vec / eta
        n = x.shape[0]
        value = n * model.batch_log_likelihood(arch, trace.outputs, y, tau=tau)
        value -= 0.5 * w_vec @ w_vec / eta
        return float(value), grad

    return logp


def hmc_predictive_samples(
    arch: MlpArchitecture,
    x: np.ndarray,
    samples: np.ndarray,
    max_draws: int,
) -> np.ndarray:
    """Predicted means for up to ``max_draws`` evenly spaced weight samples."""
    if samples.shape[0] > max_draws:
        idx = np.linspace(0, samples.shape[0] - 1, max_draws).astype(int)
        samples = samples[idx]
    preds = np.empty((samples.shape[0], np.atleast_2d(x).shape[0]))
    for i, w_vec in enumerate(samples):
        weights = model.unpack_weights(w_vec, arch)
        preds[i] = model.forward_batch(arch, weights, x).outputs[:, 0]
    return preds


def variance_correlation_run(
    dataset: Dataset,
    methods: list,
    train_cfg: TrainConfig,
    trials: int = 10,
    n_train: int = 20,
    n_test: int = 100,
    tau: float = 1.0,
    lam: float = 1.0,
    eta: float = 1.0,
    hidden_units: int = 10,
    activation: str = "relu",
    eval_samples: int = 1000,
    hmc_config: dict | None = None,
    seed: int = 0,
) -> dict:
    """Pearson correlation of each method's predictive variances with HMC.

    Every trial trains all methods and HMC on the same sampled points and
    compares variance patterns on the held-out points. A chain with
    acceptance below 0.1 flags the trial.
    """
    if dataset.n < n_train + n_test:
        raise ValueError("dataset too small for the requested trial sizes")
    hmc_config = hmc_config or {}
    arch = MlpArchitecture(
        (dataset.n_features, hidden_units, 1), activation=activation, likelihood="gaussian"
    )
    seeds = np.random.SeedSequence(seed).spawn(trials)
    cfg_base = replace(train_cfg, learn_tau=False, tau=tau)
    per_trial = []
    for t in range(trials):
        rng = np.random.default_rng(seeds[t])
        perm = rng.permutation(dataset.n)
        train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_test])
        norm = Normalizer.fit(dataset.features[train_idx], dataset.targets[train_idx])
        x_tr = norm.transform_features(dataset.features[train_idx])
        y_tr = norm.transform_targets(dataset.targets[train_idx])
        x_te = norm.transform_features(dataset.features[test_idx])
        hyper = Hyper(lam=lam, n_train=n_train, eta=eta)

        cfg_hmc = HmcConfig(
            step_size=hmc_config.get("step_size", 0.002),
            leapfrog_steps=hmc_config.get("leapfrog_steps", 10),
            num_samples=hmc_config.get("num_samples", 4000),
            burn_in=hmc_config.get("burn_in", 1000),
            num_chains=hmc_config.get("num_chains", 4),
            seed=int(rng.integers(2**31)),
        )
        init = 0.1 * rng.standard_normal(arch.n_weights)
        hmc_result = oracle.hmc_sample(bnn_log_density(arch, x_tr, y_tr, tau, eta), init, cfg_hmc)
        flagged = min(hmc_result.accept_rates) < 0.1
        hmc_preds = hmc_predictive_samples(arch, x_te, hmc_result.samples, eval_samples)
        hmc_var = norm.denorm_variance(hmc_preds.var(axis=0))

        row = {
            "trial": t,
            "pearson": {},
            "hmc_acceptance": [float(a) for a in hmc_result.accept_rates],
            "hmc_flagged": bool(flagged),
        }
        for method in methods:
            cfg = replace(cfg_base, method=method)
            result = training.fit(arch, x_tr, y_tr, hyper, cfg, rng)
            var = predictive_variance(
                arch, result.posterior, x_te, eval_samples, rng, normalizer=norm
            )
            row["pearson"][method] = pearson(var, hmc_var)
        per_trial.append(row)
    table = {
        m: aggregate([row["pearson"][m] for row in per_trial]) for m in methods
    }
    return {"per_trial": per_trial, "aggregate": table, "arch": arch.to_dict()}


# ---------------------------------------------------------------------------
# Active learning protocol


def active_learning_run(
    dataset: Dataset,
    method: str,
    train_cfg: TrainConfig,
    rounds: int = 10,
    n_train: int = 20,
    n_test: int = 100,
    acquisition: str = "variance",
    hidden_units: int = 10,
    activation: str = "relu",
    eval_samples: int = 100,
    lam: float = 1.0,
    eta: float = 1.0,
    seed: int = 0,
) -> dict:
    """Pool-based active learning: retrain from scratch, evaluate, acquire.

    ``rounds`` counts evaluations; one pool point is acquired after each
    evaluation except the last (so 10 rounds = 9 acquisitions). The
    acquisition rule is either highest predictive variance or uniform
    random; acquired points move from the pool into the training set.
    """
    if acquisition not in ("variance", "random"):
        raise ValueError("acquisition must be 'variance' or 'random'")
    if dataset.n < n_train + n_test:
        raise ValueError("dataset too small for the requested sizes")
    evaluations = max(1, rounds)
    acquisitions = max(0, rounds - 1)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    perm = rng.permutation(dataset.n)
    train_idx = list(perm[:n_train])
    test_idx = perm[n_train : n_train + n_test]
    pool = list(perm[n_train + n_test :])
    if acquisitions > len(pool):
        raise ValueError(f"pool exhausted: {len(pool)} points for {acquisitions} acquisitions")

    arch = MlpArchitecture(
        (dataset.n_features, hidden_units, 1), activation=activation, likelihood="gaussian"
    )
    cfg = replace(train_cfg, method=method)
    hyper_args = {"lam": lam, "eta": eta, "gamma_ex": 0.0}
    rows = []
    for r in range(evaluations):
        idx = np.asarray(sorted(train_idx))
        norm, result = _fit_split(dataset, idx, arch, hyper_args, cfg, rng)
        preds = predict_samples(
            arch,
            result.posterior,
            norm.transform_features(dataset.features[test_idx]),
            eval_samples,
            rng,
        )
        pred_mean = norm.denorm_predictions(preds).mean(axis=0)
        row = {
            "round": r,
            "n_train": len(train_idx),
            "rmse": rmse(pred_mean, dataset.targets[test_idx]),
            "acquired_index": None,
        }
        if r < acquisitions:
            if acquisition == "variance":
                pool_arr = np.asarray(pool)
                var = predictive_variance(
                    arch,
                    result.posterior,
                    norm.transform_features(dataset.features[pool_arr]),
                    max(2, eval_samples),
                    rng,
                    normalizer=norm,
                )
                chosen = int(pool_arr[int(np.argmax(var))])
            else:
                chosen = int(pool[int(rng.integers(len(pool)))])
            pool.remove(chosen)
            train_idx.append(chosen)
            row["acquired_index"] = chosen
        rows.append(row)
    return {"rounds": rows, "arch": arch.to_dict(), "acquisition": acquisition}
