"""Prior families over (sigma2, mu), proper or improper.

Densities are unnormalized and kept in log form; every downstream quantity
is a ratio, so normalizers never matter. The sigma part of both families is
sigma^(-k) in the d(sigma) measure.
"""

from dataclasses import dataclass
import math

import numpy as np

from .model import ParamPoint


@dataclass(frozen=True)
class PowerPrior:
    """sigma^(-k) in d(sigma), mu uniform on R^N."""

    exponent_k: float

    @property
    def label(self):
        return f"power(k={self.exponent_k:g})"


@dataclass(frozen=True)
class GaussHierPrior:
    """sigma^(-k) in d(sigma); mu | sigma Gaussian with AR(1) correlation.

    Covariance of mu is tau2 * C(rho), or sigma2 * tau2 * C(rho) when
    scale_by_sigma is set. C(rho) is the unit-variance AR(1) correlation
    matrix, positive definite for |rho| < 1.
    """

    exponent_k: float
    mu0: float
    tau2: float
    rho: float
    scale_by_sigma: bool = False

    def __post_init__(self):
        if not self.tau2 > 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        if not abs(self.rho) < 1:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")

    @property
    def label(self):
        scale = "*sigma2" if self.scale_by_sigma else ""
        return (
            f"gauss-hier(k={self.exponent_k:g}, mu0={self.mu0:g}, "
            f"tau2={self.tau2:g}{scale}, rho={self.rho:g})"
        )


@dataclass(frozen=True)
class PriorValidity:
    valid: bool
    reason: str
    min_N_for_finiteness: int | None = None

    def __post_init__(self):
        if not self.valid and not self.reason:
            raise ValueError("invalid verdicts must carry a reason")


# ---------------------------------------------------------------------------
# AR(1) machinery. The precision of C(rho) is tridiagonal, so every
# mu-marginalization below is O(N).
# ---------------------------------------------------------------------------

def ar1_precision_bands(rho, n):
    """(diag, off) of Q = C(rho)^-1 for the AR(1) correlation matrix."""
    if n == 1:
        return np.array([1.0]), np.array([])
    denom = 1.0 - rho * rho
    diag = np.full(n, (1.0 + rho * rho) / denom)
    diag[0] = diag[-1] = 1.0 / denom
    off = np.full(n - 1, -rho / denom)
    return diag, off


def ar1_matvec(rho, v):
    """Q v for the AR(1) precision, O(N)."""
    diag, off = ar1_precision_bands(rho, len(v))
    out = diag * v
    if len(v) > 1:
        out[:-1] += off * v[1:]
        out[1:] += off * v[:-1]
    return out


def ar1_quadform(rho, d):
    """d' Q d, O(N)."""
    return float(d @ ar1_matvec(rho, d))


def ar1_logdet_corr(rho, n):
    """log det C(rho) = (n-1) log(1 - rho^2)."""
    return (n - 1) * math.log(1.0 - rho * rho)


def ar1_sample(rho, n, rng):
    """A unit-marginal-variance AR(1) path of length n."""
    z = rng.standard_normal(n)
    e = np.empty(n)
    e[0] = z[0]
    scale = math.sqrt(1.0 - rho * rho)
    for i in range(1, n):
        e[i] = rho * e[i - 1] + scale * z[i]
    return e


def sample_mu(prior, n_groups, sigma2, rng):
    """Draw mu from the prior's conditional mu distribution given sigma2.

    Only proper mu factors can be sampled; PowerPrior (uniform mu) raises.
    """
    if isinstance(prior, PowerPrior):
        raise ValueError("uniform improper mu cannot be sampled; supply mu directly")
    sd = math.sqrt(prior.tau2 * (sigma2 if prior.scale_by_sigma else 1.0))
    return prior.mu0 + sd * ar1_sample(prior.rho, n_groups, rng)


# ---------------------------------------------------------------------------
# Densities and validity.
# ---------------------------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def prior_from_spec(spec: dict):
    """Config grammar: family=power|gauss-hier with keys k, mu0, tau2, rho,
    scale_by_sigma. Unknown keys are rejected."""
    spec = dict(spec)
    family = spec.pop("family", None)
    if family == "power":
        k = spec.pop("k", 0.0)
        if spec:
            raise ValueError(f"unknown prior keys for power family: {sorted(spec)}")
        return PowerPrior(exponent_k=float(k))
    if family == "gauss-hier":
        kwargs = dict(
            exponent_k=float(spec.pop("k", 0.0)),
            mu0=float(spec.pop("mu0", 0.0)),
            tau2=float(spec.pop("tau2", 1.0)),
            rho=float(spec.pop("rho", 0.0)),
            scale_by_sigma=bool(spec.pop("scale_by_sigma", False)),
        )
        if spec:
            raise ValueError(f"unknown prior keys for gauss-hier family: {sorted(spec)}")
        return GaussHierPrior(**kwargs)
    raise ValueError(f"unknown prior family {family!r}; use power or gauss-hier")


def prior_to_spec(prior) -> dict:
    if isinstance(prior, PowerPrior):
        return {"family": "power", "k": prior.exponent_k}
    return {
        "family": "gauss-hier",
        "k": prior.exponent_k,
        "mu0": prior.mu0,
        "tau2": prior.tau2,
        "rho": prior.rho,
        "scale_by_sigma": prior.scale_by_sigma,
    }


def log_prior_density(prior, theta: ParamPoint) -> float:
    """log of the (unnormalized, possibly improper) density at theta."""
    sigma = math.sqrt(theta.sigma2)
    out = -prior.exponent_k * math.log(sigma)
    if isinstance(prior, PowerPrior):
        return out  # uniform mu factor contributes zero
    n = len(theta.mu)
    var_scale = prior.tau2 * (theta.sigma2 if prior.scale_by_sigma else 1.0)
    d = theta.mu - prior.mu0
    quad = ar1_quadform(prior.rho, d) / var_scale
    logdet = n * math.log(var_scale) + ar1_logdet_corr(prior.rho, n)
    return out - 0.5 * (n * _LOG_2PI + logdet + quad)


def validate_prior(prior, n_groups, n_reps) -> PriorValidity:
    """Marginal-finiteness verdict for this (N, J).

    The data marginal r(x) is finite iff the mu-integrated sigma density is
    integrable at sigma -> infinity (the exp factor handles sigma -> 0):

      PowerPrior:      sigma^(N - NJ - k)      => need N(J-1) + k > 1
      GaussHierPrior:  sigma^(-NJ - k)         => need N*J + k > 1

    The hierarchical case loses the sigma^N gain of the uniform-mu integral:
    the proper mu convolution N(m | mu0, sigma2/J I + T) contributes
    sigma^(-N) at large sigma instead.
    """
    n, j = int(n_groups), int(n_reps)
    k = prior.exponent_k
    if isinstance(prior, PowerPrior):
        margin = n * (j - 1) + k
        slope = j - 1
    else:
        margin = n * j + k
        slope = j
    valid = margin > 1.0
    # smallest N making the exponent condition hold (at this J, k)
    min_n = max(1, math.floor((1.0 - k) / slope) + 1)
    if valid:
        return PriorValidity(True, f"large-sigma exponent margin {margin:g} > 1", min_n)
    return PriorValidity(
        False,
        f"marginal r(x) diverges at large sigma: exponent margin {margin:g} <= 1",
        min_n if slope > 0 else None,
    )
