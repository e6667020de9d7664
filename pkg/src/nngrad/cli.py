"""Command-line entry point.

Commands: ``train`` (repeated-split regression benchmark), ``eval``
(checkpoint evaluation), ``active`` (pool-based active learning),
``varcorr`` (predictive-variance correlation against HMC) and ``check``
(self-check oracle suites). Every command emits one JSON document; all
nondeterministic values live under the ``timing`` key so repeated runs
with the same seed are byte-identical elsewhere.

Option precedence: built-in defaults, then a flat key=value config file
(``--config``, or ``$NNGRAD_CONFIG_DIR/<command>.cfg`` when the variable
is set), then explicit command-line flags. Unknown config keys are
rejected before any work starts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, data, oracle, posterior as post_mod, training
from .data import SplitSpec
from .model import MlpArchitecture
from .optim import TrustRegionSchedule
from .training import TrainConfig

CONFIG_ENV_VAR = "NNGRAD_CONFIG_DIR"

# Per-command option tables: name -> (type, default, help). These drive both
# argparse registration and config-file validation.
_COMMON = {
    "seed": (int, 0, "root random seed"),
    "out": (str, None, "output JSON path (default: stdout)"),
}
_TRAIN_LIKE = {
    "epochs": (int, 120, "training epochs"),
    "batch": (int, 10, "minibatch size"),
    "alpha": (float, 0.01, "learning rate"),
    "beta_tilde": (float, 0.001, "Fisher moving-average rate"),
    "beta1": (float, 0.9, "momentum decay (diagonal method only)"),
    "t_stats": (int, 1, "steps between Kronecker statistics updates"),
    "t_inv": (int, 20, "steps between damped-inverse refreshes"),
    "lam": (float, 1.0, "KL weight"),
    "eta": (float, 1.0, "prior variance"),
    "gamma_ex": (float, 0.0, "extrinsic damping"),
    "fisher": (str, "true", "Fisher estimator: true or empirical"),
    "fixed_tau": (float, None, "fix the noise precision instead of learning it"),
    "tau_lr": (float, 1e-5, "learning rate for the noise-precision posterior"),
    "tau_prior": (str, "6,6", "Gamma prior on the noise precision: shape,rate"),
    "no_lr_decay": (bool, False, "disable the halfway 10x learning-rate decay"),
    "warmup": (int, 10, "batches of Fisher warmup before stepping"),
    "trust_region": (str, None, "c0,zeta,alpha_max Fisher-norm step sizing"),
}
OPTIONS = {
    "train": {
        **_COMMON,
        **_TRAIN_LIKE,
        "dataset": (str, None, "CSV path (last column is the target)"),
        "method": (str, None, "nng-ffg, nng-mvg or nng-full"),
        "splits": (int, 20, "number of train/test splits"),
        "train_fraction": (float, 0.9, "training fraction per split"),
        "hidden": (int, 50, "hidden units"),
        "activation": (str, "relu", "relu or tanh"),
        "samples": (int, 1000, "posterior samples at evaluation"),
        "workers": (int, 1, "parallel split workers"),
        "checkpoint_dir": (str, None, "directory for per-split checkpoints"),
        "step_log": (str, None, "line-delimited step-record path"),
        "log_every": (int, 0, "steps between step records (0 disables)"),
    },
    "eval": {
        **_COMMON,
        "checkpoint": (str, None, "checkpoint path"),
        "dataset": (str, None, "CSV to evaluate on (treated as a test set)"),
        "samples": (int, 1000, "posterior samples at evaluation"),
    },
    "active": {
        **_COMMON,
        **_TRAIN_LIKE,
        "dataset": (str, None, "CSV path"),
        "method": (str, None, "nng-ffg, nng-mvg or nng-full"),
        "acquisition": (str, "variance", "variance or random"),
        "rounds": (int, 10, "evaluations (acquisitions = rounds - 1)"),
        "n_train": (int, 20, "initial labeled points"),
        "n_test": (int, 100, "held-out test points"),
        "hidden": (int, 10, "hidden units"),
        "activation": (str, "relu", "relu or tanh"),
        "samples": (int, 100, "posterior samples for evaluation/acquisition"),
    },
    "varcorr": {
        **_COMMON,
        **_TRAIN_LIKE,
        "dataset": (str, None, "CSV path"),
        "methods": (str, "nng-ffg,nng-mvg", "comma-separated methods"),
        "trials": (int, 10, "independent trials"),
        "n_train": (int, 20, "labeled points per trial"),
        "n_test": (int, 100, "points for variance comparison"),
        "hidden": (int, 10, "hidden units"),
        "activation": (str, "relu", "relu or tanh"),
        "samples": (int, 1000, "posterior samples for variances"),
        "tau": (float, 1.0, "fixed noise precision shared with HMC"),
        "hmc_chains": (int, 4, "HMC chains"),
        "hmc_iters": (int, 5000, "HMC iterations per chain (incl. burn-in)"),
        "hmc_burnin": (int, 1000, "HMC burn-in per chain"),
        "hmc_step": (float, 0.002, "HMC leapfrog step size"),
        "hmc_leapfrog": (int, 10, "HMC leapfrog steps"),
    },
    "check": {
        **_COMMON,
        "fast": (bool, False, "reduced sizes for a quick pass"),
    },
}


class CliError(Exception):
    """User-facing configuration or I/O error; exits with status 2."""


def _parse_config_file(path: Path, command: str) -> dict:
    allowed = OPTIONS[command]
    values = {}
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise CliError(f"{path}:{lineno}: unknown key {key!r} for command {command!r}")
        typ = allowed[key][0]
        try:
            values[key] = raw.lower() in ("1", "true", "yes") if typ is bool else typ(raw)
        except ValueError:
            raise CliError(f"{path}:{lineno}: cannot parse {key}={raw!r} as {typ.__name__}")
    return values


def _effective_config(args: argparse.Namespace, command: str) -> dict:
    cfg = {k: spec[1] for k, spec in OPTIONS[command].items()}
    config_path = getattr(args, "config", None)
    if config_path is None and os.environ.get(CONFIG_ENV_VAR):
        candidate = Path(os.environ[CONFIG_ENV_VAR]) / f"{command}.cfg"
        if candidate.exists():
            config_path = str(candidate)
    if config_path is not None:
        cfg.update(_parse_config_file(Path(config_path), command))
    for key in OPTIONS[command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nngrad",
        description="Variational Bayesian neural networks via noisy natural gradient.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", type=str, default=None, help="flat key=value config file")
        for key, (typ, _default, help_text) in options.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action="store_const", const=True, default=None, help=help_text)
            else:
                p.add_argument(flag, type=typ, default=None, help=help_text)
    return parser


def _require(cfg: dict, command: str, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) is None:
            raise CliError(f"{command}: --{key.replace('_', '-')} is required")


def _load_dataset(cfg: dict) -> data.Dataset:
    path = Path(cfg["dataset"])
    if not path.exists():
        raise CliError(f"dataset not found: {path}")
    return data.load_csv(path)


def _train_config(cfg: dict, method: str | None = None) -> TrainConfig:
    prior = tuple(float(v) for v in str(cfg["tau_prior"]).split(","))
    if len(prior) != 2:
        raise CliError("tau_prior must be 'shape,rate'")
    trust = None
    if cfg.get("trust_region"):
        parts = [float(v) for v in str(cfg["trust_region"]).split(",")]
        if len(parts) != 3:
            raise CliError("trust_region must be 'c0,zeta,alpha_max'")
        trust = TrustRegionSchedule(c0=parts[0], zeta=parts[1], alpha_max=parts[2])
    try:
        return TrainConfig(
            method=method or cfg["method"],
            epochs=cfg["epochs"],
            batch_size=cfg["batch"],
            alpha=cfg["alpha"],
            beta_tilde=cfg["beta_tilde"],
            beta1=cfg["beta1"],
            t_stats=cfg["t_stats"],
            t_inv=cfg["t_inv"],
            fisher=cfg["fisher"],
            learn_tau=cfg["fixed_tau"] is None,
            tau=cfg["fixed_tau"] if cfg["fixed_tau"] is not None else 1.0,
            tau_prior=prior,
            tau_lr=cfg["tau_lr"],
            lr_decay_at_half=not cfg["no_lr_decay"],
            warmup_batches=cfg["warmup"],
            trust_region=trust,
            log_every=cfg.get("log_every", 0),
        )
    except ValueError as err:
        raise CliError(str(err))


def _emit(doc: dict, out_path: str | None, started: float) -> None:
    doc["timing"] = {
        "wall_time_s": time.perf_counter() - started,
        "finished_at_unix": time.time(),
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path is None:
        sys.stdout.write(text)
    else:
        Path(out_path).write_text(text)


def _guard_full_method(method: str, arch: MlpArchitecture) -> None:
    if method == "nng-full" and arch.n_weights > 500:
        raise CliError(
            f"nng-full maintains a dense {arch.n_weights}x{arch.n_weights} Fisher; "
            "refusing networks with more than 500 weights. Use nng-mvg or nng-ffg, "
            "or shrink the hidden layer."
        )


# ---------------------------------------------------------------------------
# Commands


def cmd_train(cfg: dict) -> dict:
    _require(cfg, "train", "dataset", "method")
    dataset = _load_dataset(cfg)
    arch = MlpArchitecture(
        (dataset.n_features, cfg["hidden"], 1), cfg["activation"], "gaussian"
    )
    _guard_full_method(cfg["method"], arch)
    train_cfg = _train_config(cfg)
    split_spec = SplitSpec(
        train_fraction=cfg["train_fraction"], repeats=cfg["splits"], seed=cfg["seed"]
    )
    step_writer = open(cfg["step_log"], "w") if cfg.get("step_log") else None
    try:
        report = bench.regression_benchmark(
            dataset,
            cfg["method"],
            split_spec=split_spec,
            train_cfg=train_cfg,
            hidden_units=cfg["hidden"],
            activation=cfg["activation"],
            eval_samples=cfg["samples"],
            lam=cfg["lam"],
            eta=cfg["eta"],
            gamma_ex=cfg["gamma_ex"],
            seed=cfg["seed"],
            workers=cfg["workers"],
        )
    finally:
        if step_writer is not None:
            step_writer.close()
    artifacts = report.pop("artifacts")
    if cfg.get("checkpoint_dir"):
        ckpt_dir = Path(cfg["checkpoint_dir"])
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, (post, q_tau, norm) in enumerate(artifacts):
            path = ckpt_dir / f"split{i:03d}.ckpt.json"
            post_mod.save_checkpoint(
                path,
                post,
                step=0,
                seed=cfg["seed"],
                arch=MlpArchitecture.from_dict(report["arch"]),
                q_tau=q_tau,
                extra={"normalizer": norm.to_dict(), "split": i},
            )
            paths.append(str(path))
        report["checkpoints"] = paths
    return {"command": "train", "config": cfg, "results": report}


def cmd_eval(cfg: dict) -> dict:
    _require(cfg, "eval", "checkpoint", "dataset")
    ckpt_path = Path(cfg["checkpoint"])
    if not ckpt_path.exists():
        raise CliError(f"checkpoint not found: {ckpt_path}")
    ckpt = post_mod.load_checkpoint(ckpt_path)
    if ckpt.arch is None or "normalizer" not in ckpt.extra:
        raise CliError("checkpoint lacks the architecture or normalizer needed for evaluation")
    dataset = _load_dataset(cfg)
    norm = data.Normalizer.from_dict(ckpt.extra["normalizer"])
    rng = np.random.default_rng(cfg["seed"])
    preds = bench.predict_samples(
        ckpt.arch,
        ckpt.posterior,
        norm.transform_features(dataset.features),
        cfg["samples"],
        rng,
    )
    pred_mean = norm.denorm_predictions(preds).mean(axis=0)
    ll = bench.test_log_likelihood(
        ckpt.arch,
        ckpt.posterior,
        dataset.features,
        dataset.targets,
        norm,
        cfg["samples"],
        rng,
        q_tau=ckpt.q_tau,
        tau=None if ckpt.q_tau is not None else 1.0,
    )
    results = {
        "rmse": bench.rmse(pred_mean, dataset.targets),
        "loglik": ll,
        "n_points": dataset.n,
    }
    return {"command": "eval", "config": cfg, "results": results}


def cmd_active(cfg: dict) -> dict:
    _require(cfg, "active", "dataset", "method")
    dataset = _load_dataset(cfg)
    arch = MlpArchitecture((dataset.n_features, cfg["hidden"], 1), cfg["activation"])
    _guard_full_method(cfg["method"], arch)
    report = bench.active_learning_run(
        dataset,
        cfg["method"],
        train_cfg=_train_config(cfg),
        rounds=cfg["rounds"],
        n_train=cfg["n_train"],
        n_test=cfg["n_test"],
        acquisition=cfg["acquisition"],
        hidden_units=cfg["hidden"],
        activation=cfg["activation"],
        eval_samples=cfg["samples"],
        lam=cfg["lam"],
        eta=cfg["eta"],
        seed=cfg["seed"],
    )
    return {"command": "active", "config": cfg, "results": report}


def cmd_varcorr(cfg: dict) -> dict:
    _require(cfg, "varcorr", "dataset")
    dataset = _load_dataset(cfg)
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    if not methods:
        raise CliError("varcorr: no methods given")
    train_cfg = _train_config(cfg, method=methods[0])
    report = bench.variance_correlation_run(
        dataset,
        methods,
        train_cfg=train_cfg,
        trials=cfg["trials"],
        n_train=cfg["n_train"],
        n_test=cfg["n_test"],
        tau=cfg["tau"],
        lam=cfg["lam"],
        eta=cfg["eta"],
        hidden_units=cfg["hidden"],
        activation=cfg["activation"],
        eval_samples=cfg["samples"],
        hmc_config={
            "num_chains": cfg["hmc_chains"],
            "num_samples": cfg["hmc_iters"] - cfg["hmc_burnin"],
            "burn_in": cfg["hmc_burnin"],
            "step_size": cfg["hmc_step"],
            "leapfrog_steps": cfg["hmc_leapfrog"],
        },
        seed=cfg["seed"],
    )
    return {"command": "varcorr", "config": cfg, "results": report}


def cmd_check(cfg: dict) -> dict:
    from . import selfcheck

    report = selfcheck.run_suites(fast=bool(cfg["fast"]), seed=cfg["seed"])
    return {"command": "check", "config": cfg, "results": report}


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "active": cmd_active,
    "varcorr": cmd_varcorr,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = _effective_config(args, args.command)
        doc = COMMANDS[args.command](cfg)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    _emit(doc, cfg.get("out"), started)
    if args.command == "check" and not doc["results"]["all_passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
