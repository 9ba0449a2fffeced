"""Divergences between grouped-Gaussian likelihoods.

Argument convention, fixed once: kl_products(a, b) = D_KL(f_a || f_b),
the expectation taken under a's density (first slot). The forward/reverse
distinction downstream hinges entirely on this order.
"""

import math

import numpy as np
from scipy import stats

from .model import ParamPoint, rng_from


def _check_pair(a: ParamPoint, b: ParamPoint, n_groups):
    if len(a.mu) != n_groups or len(b.mu) != n_groups:
        raise ValueError(
            f"mu lengths ({len(a.mu)}, {len(b.mu)}) must equal n_groups={n_groups}"
        )


def kl_single(a: ParamPoint, b: ParamPoint, group_index) -> float:
    """D_KL for one observation of group group_index."""
    if not 0 <= group_index < len(a.mu) or group_index >= len(b.mu):
        raise IndexError(f"group index {group_index} out of range")
    r = a.sigma2 / b.sigma2
    dm = a.mu[group_index] - b.mu[group_index]
    return 0.5 * (r - 1.0 - math.log(r)) + dm * dm / (2.0 * b.sigma2)


def kl_products(a: ParamPoint, b: ParamPoint, n_groups, n_reps) -> float:
    """D_KL(f_a || f_b) over the full N x J product.

    (NJ/2)[r - 1 - log r] + (J / (2 sigma_b^2)) |mu_a - mu_b|^2, r = sa/sb.
    """
    _check_pair(a, b, n_groups)
    r = a.sigma2 / b.sigma2
    dm2 = float(np.sum((a.mu - b.mu) ** 2))
    return (
        0.5 * n_groups * n_reps * (r - 1.0 - math.log(r))
        + n_reps * dm2 / (2.0 * b.sigma2)
    )


def tv_distance(a: ParamPoint, b: ParamPoint, n_groups, n_reps, tolerance=1e-10) -> float:
    """Total variation between the two N*J-dimensional product Gaussians.

    The log density ratio is monotone in a single radial statistic (after
    completing the square), so TV reduces to a difference of (noncentral)
    chi-square CDFs at the density crossing point; exact to CDF precision,
    well inside any requested tolerance.
    """
    _check_pair(a, b, n_groups)
    d = n_groups * n_reps
    s1, s2 = a.sigma2, b.sigma2
    dmu2 = float(np.sum((a.mu - b.mu) ** 2))  # per-replicate; J copies below

    if math.isclose(s1, s2, rel_tol=1e-14):
        if dmu2 == 0.0:
            return 0.0
        delta = math.sqrt(n_reps * dmu2)
        return 2.0 * stats.norm.cdf(delta / (2.0 * math.sqrt(s1))) - 1.0

    beta = 0.5 / s2 - 0.5 / s1
    # per-group center of the quadratic discriminant (constant within a group)
    v = (b.mu / s2 - a.mu / s1) / (2.0 * beta)
    const = -0.5 * d * math.log(s1 / s2)
    qa2 = n_reps * float(np.sum((v - a.mu) ** 2))
    qb2 = n_reps * float(np.sum((v - b.mu) ** 2))
    c0 = const - qa2 / (2.0 * s1) + qb2 / (2.0 * s2)
    tstar = -c0 / beta  # threshold on ||x - v||^2; positive when a != b
    if tstar <= 0:
        return 0.0
    cdf_a = stats.ncx2.cdf(tstar / s1, d, qa2 / s1)
    cdf_b = stats.ncx2.cdf(tstar / s2, d, qb2 / s2)
    return abs(cdf_a - cdf_b)


def tv_distance_mc(a: ParamPoint, b: ParamPoint, n_groups, n_reps, count, seed):
    """Monte Carlo cross-check: E_a[(1 - f_b/f_a)_+], with standard error."""
    _check_pair(a, b, n_groups)
    rng = rng_from(seed)
    x = a.mu[:, None, None] + math.sqrt(a.sigma2) * rng.standard_normal(
        (count, n_groups, n_reps)
    ).transpose(1, 0, 2)
    # log f_a - log f_b per draw
    da = np.sum((x - a.mu[:, None, None]) ** 2, axis=(0, 2))
    db = np.sum((x - b.mu[:, None, None]) ** 2, axis=(0, 2))
    d = n_groups * n_reps
    log_ratio = (
        -0.5 * d * math.log(a.sigma2 / b.sigma2)
        - da / (2 * a.sigma2)
        + db / (2 * b.sigma2)
    )
    vals = np.clip(1.0 - np.exp(-log_ratio), 0.0, 1.0)
    return float(np.mean(vals)), float(np.std(vals) / math.sqrt(count))
