"""Dataset loading, train/test splitting and per-split normalization.

CSV convention: comma-separated numeric columns, the last column is the
target, and an optional single header row is detected automatically.
Features and training targets are standardized with statistics computed on
the training portion of each split; metrics are always reported on the raw
target scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    targets: np.ndarray  # (n,)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("features and targets disagree on the number of rows")
        if not np.all(np.isfinite(self.features)) or not np.all(np.isfinite(self.targets)):
            raise ValueError("dataset contains nonfinite entries")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def load_csv(path) -> Dataset:
    """Load a numeric CSV; last column is the target, header auto-detected."""
    rows = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or all(not line.strip() for line in lines):
        raise ValueError(f"{path}: empty file")
    start = 0
    first = lines[0].split(",")
    try:
        [float(tok) for tok in first]
    except ValueError:
        start = 1  # header row
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        toks = line.split(",")
        try:
            rows.append([float(tok) for tok in toks])
        except ValueError as err:
            raise ValueError(f"{path}: line {lineno}: {err}") from None
        if len(rows[-1]) != len(first):
            raise ValueError(
                f"{path}: line {lineno}: expected {len(first)} fields, got {len(rows[-1])}"
            )
    arr = np.asarray(rows, dtype=float)
    if arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and one target column")
    return Dataset(features=arr[:, :-1], targets=arr[:, -1])


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    repeats: int = 20
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


def make_splits(n: int, spec: SplitSpec) -> list:
    """Disjoint, exhaustive (train, test) index pairs; one per repeat.

    Each repeat shuffles with its own generator spawned from the spec seed,
    so identical specs give identical splits.
    """
    seqs = np.random.SeedSequence(spec.seed).spawn(spec.repeats)
    n_train = int(np.floor(n * spec.train_fraction))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"train fraction {spec.train_fraction} leaves an empty side for n={n}")
    splits = []
    for seq in seqs:
        perm = np.random.default_rng(seq).permutation(n)
        splits.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return splits


class Normalizer:
    """Standardization fitted on a training subset; constant columns get std 1."""

    def __init__(self, feature_means, feature_stds, target_mean, target_std):
        self.feature_means = np.asarray(feature_means, dtype=float)
        self.feature_stds = np.asarray(feature_stds, dtype=float)
        self.target_mean = float(target_mean)
        self.target_std = float(target_std)

    @staticmethod
    def fit(features: np.ndarray, targets: np.ndarray) -> "Normalizer":
        if features.shape[0] == 0:
            raise ValueError("cannot fit a normalizer on an empty training set")
        fm = features.mean(axis=0)
        fs = features.std(axis=0)
        fs[fs == 0.0] = 1.0
        tm = float(targets.mean())
        ts = float(targets.std())
        if ts == 0.0:
            ts = 1.0
        return Normalizer(fm, fs, tm, ts)

    def transform_features(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feature_means) / self.feature_stds

    def transform_targets(self, y: np.ndarray) -> np.ndarray:
        return (y - self.target_mean) / self.target_std

    def denorm_predictions(self, yhat: np.ndarray) -> np.ndarray:
        return yhat * self.target_std + self.target_mean

    def denorm_variance(self, var: np.ndarray) -> np.ndarray:
        return var * self.target_std**2

    def to_dict(self) -> dict:
        return {
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    @staticmethod
    def from_dict(d: dict) -> "Normalizer":
        return Normalizer(
            d["feature_means"], d["feature_stds"], d["target_mean"], d["target_std"]
        )
