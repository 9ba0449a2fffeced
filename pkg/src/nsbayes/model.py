"""Grouped Gaussian observation model with a shared variance.

N groups of J replicates, x_nj ~ N(mu_n, sigma2), J >= 2 fixed while N grows.
Everything downstream reduces to the sufficient statistics (s2, group means).
"""

from dataclasses import dataclass
import json
import math
import os

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


def rng_from(master_seed, *path):
    """Deterministic substream keyed by (master_seed, *path).

    Scheduling independent: the stream depends only on the key, never on
    draw order elsewhere.
    """
    return np.random.default_rng([int(master_seed), *[int(p) for p in path]])


@dataclass(frozen=True)
class Dataset:
    """Observation matrix, one row per group, J >= 2 columns."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError(f"values must be a 2-d matrix, got ndim={v.ndim}")
        if v.shape[0] < 1:
            raise ValueError("need at least one group")
        if v.shape[1] < 2:
            raise ValueError(f"need at least 2 replicates per group, got J={v.shape[1]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("all observations must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_groups(self):
        return self.values.shape[0]

    @property
    def n_reps(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class SuffStats:
    """Pooled within-group variance s2 and the vector of group means."""

    s2: float
    means: np.ndarray

    def __post_init__(self):
        if self.s2 < 0:
            raise ValueError("s2 must be nonnegative")
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))


@dataclass(frozen=True)
class ParamPoint:
    """A point (sigma2, mu_1..mu_N) of the parameter space."""

    sigma2: float
    mu: np.ndarray

    def __post_init__(self):
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be a positive finite real, got {self.sigma2}")
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        object.__setattr__(self, "mu", mu)


def suff_stats(data: Dataset) -> SuffStats:
    """s2 = mean over all (n, j) of (x_nj - m_n)^2; means = row means."""
    means = data.values.mean(axis=1)
    dev = data.values - means[:, None]
    return SuffStats(s2=float(np.mean(dev * dev)), means=means)


def log_likelihood(data: Dataset, theta: ParamPoint) -> float:
    """Direct per-observation Gaussian log-likelihood sum."""
    if len(theta.mu) != data.n_groups:
        raise ValueError(
            f"mu has length {len(theta.mu)}, expected N={data.n_groups}"
        )
    dev = data.values - theta.mu[:, None]
    n_obs = data.values.size
    return float(
        -0.5 * n_obs * (_LOG_2PI + math.log(theta.sigma2))
        - np.sum(dev * dev) / (2.0 * theta.sigma2)
    )


def log_likelihood_suffstats(stats: SuffStats, n_reps: int, theta: ParamPoint) -> float:
    """Same quantity through (s2, means); must agree with log_likelihood."""
    n_groups = len(stats.means)
    if len(theta.mu) != n_groups:
        raise ValueError(
            f"mu has length {len(theta.mu)}, expected N={n_groups}"
        )
    nj = n_groups * n_reps
    ss = nj * stats.s2 + n_reps * float(np.sum((stats.means - theta.mu) ** 2))
    return float(
        -0.5 * nj * (_LOG_2PI + math.log(theta.sigma2)) - ss / (2.0 * theta.sigma2)
    )


def simulate(n_groups, n_reps, sigma2, mu, seed=None, rng=None) -> Dataset:
    """Draw x_nj ~ N(mu_n, sigma2).

    mu may be a scalar (broadcast) or a length-N vector. Pass either an
    explicit seed or a Generator; results are bit-reproducible for a fixed
    seed.
    """
    if n_reps < 2:
        raise ValueError(f"n_reps must be >= 2, got {n_reps}")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if rng is None:
        if seed is None:
            raise ValueError("an explicit seed (or rng) is required")
        rng = rng_from(seed)
    mu = np.broadcast_to(np.atleast_1d(np.asarray(mu, dtype=float)), (n_groups,))
    values = mu[:, None] + math.sqrt(sigma2) * rng.standard_normal((n_groups, n_reps))
    return Dataset(values=values)


def save_dataset(data: Dataset, csv_path, meta=None):
    """CSV (one row per group) plus optional sidecar <path>.json metadata."""
    np.savetxt(csv_path, data.values, delimiter=",")
    if meta is not None:
        with open(str(csv_path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def load_dataset(csv_path):
    """Returns (Dataset, meta-or-None)."""
    values = np.loadtxt(csv_path, delimiter=",", ndmin=2)
    meta = None
    side = str(csv_path) + ".json"
    if os.path.exists(side):
        with open(side) as fh:
            meta = json.load(fh)
    return Dataset(values=values), meta
