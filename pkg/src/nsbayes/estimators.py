"""Point estimators for the grouped-Gaussian problem.

The headline estimator takes the reverse-KL loss D_KL(f_estimate || f_true):
sigma2_hat = 1 / E[1/sigma2 | x], mu_hat_n = sigma2_hat * E[mu_n/sigma2 | x].
Competitors: forward-KL (minekl), MLE, MAP, posterior expectation, and the
classical J/(J-1) corrected variance baseline.

Every estimator raises a typed error when its defining quantity does not
exist; nothing is silently regularized.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import optimize

from .errors import MomentDivergent, OptimizerFailed, RiskDivergent
from .model import Dataset, ParamPoint, log_likelihood, suff_stats
from .posterior import Posterior
from .priors import log_prior_density


@dataclass(frozen=True)
class Estimate:
    sigma2_hat: float
    mu_hat: np.ndarray
    estimator_name: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma2_hat > 0:
            raise ValueError(f"sigma2_hat must be positive, got {self.sigma2_hat}")
        object.__setattr__(self, "mu_hat", np.asarray(self.mu_hat, dtype=float))


@dataclass(frozen=True)
class LossSpec:
    """Argument order into kl_products: reverse_kl puts the estimate first."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("reverse_kl", "forward_kl"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


def _minimize_1d(fn, t0, xtol=1e-10, span=40.0):
    res = optimize.minimize_scalar(
        fn, bounds=(t0 - span, t0 + span), method="bounded",
        options={"xatol": xtol},
    )
    if not res.success:
        raise OptimizerFailed(f"bounded 1-d minimization failed: {res.message}")
    return float(res.x), float(res.fun)


def _require_nondegenerate(stats):
    if not stats.s2 > 0:
        raise MomentDivergent("degenerate dataset (s2 = 0); estimator undefined")


# ---------------------------------------------------------------------------
# reverse-KL estimator
# ---------------------------------------------------------------------------

def rkl_estimate(data: Dataset, prior, method="auto") -> Estimate:
    """sigma2_hat = 1/E[1/sigma2|x]; mu_hat = sigma2_hat * E[mu/sigma2|x]."""
    post = Posterior(data, prior)
    _require_nondegenerate(post.stats)
    if method == "auto":
        method = "closed_form" if post.has_closed_form() else "quadrature"
    if method == "closed_form":
        e_inv = post.expect_closed("inv_sigma2")
        b = np.array([post.expect_closed("mu_over_sigma2", n) for n in range(post.N)])
    elif method == "quadrature":
        e_inv = post.expect_quadrature("inv_sigma2")
        b = np.array(
            [post.expect_quadrature("mu_over_sigma2", n) for n in range(post.N)]
        )
    elif method == "importance":
        sample = post.importance_sample(100_000, seed=0)
        e_inv, _ = sample.expect("inv_sigma2")
        b = np.array([sample.expect("mu_over_sigma2", n)[0] for n in range(post.N)])
    else:
        raise ValueError(f"unknown method {method!r}")
    sigma2_hat = 1.0 / e_inv
    return Estimate(sigma2_hat, sigma2_hat * b, "rkl", {"method": method})


# ---------------------------------------------------------------------------
# generic Bayes-risk minimization
# ---------------------------------------------------------------------------

def _posterior_moments_for_loss(post: Posterior, loss: LossSpec, method, seed):
    """The scalar and per-group posterior moments each risk needs."""
    if method == "importance":
        sample = post.importance_sample(100_000, seed)
        ex = lambda phi, n=None: sample.expect(phi, n)[0]
    else:
        ex = lambda phi, n=None: post.expect_quadrature(phi, n)

    e_log = ex("log_sigma2")
    if loss.kind == "reverse_kl":
        e_inv = ex("inv_sigma2")
        b = np.array([ex("mu_over_sigma2", n) for n in range(post.N)])
        # E[mu_n^2/sigma2]: conditional second moment, slope -2 in t
        c = np.empty(post.N)
        if method == "importance":
            for n in range(post.N):
                mu = sample.mu_column(n)
                c[n] = float(np.sum(sample.weights * mu * mu / sample.sigma2))
        else:
            for n in range(post.N):
                c[n] = post.mu2_over_sigma2_quad(n)
        return {"e_inv": e_inv, "e_log": e_log, "b": b, "c": c}

    try:
        e_s2 = ex("sigma2")
    except MomentDivergent as exc:
        raise RiskDivergent(f"forward-KL risk infinite: {exc}") from exc
    mu_mean = np.array([ex("mu", n) for n in range(post.N)])
    mu2 = np.empty(post.N)
    if method == "importance":
        for n in range(post.N):
            mu = sample.mu_column(n)
            mu2[n] = float(np.sum(sample.weights * mu * mu))
    else:
        for n in range(post.N):
            mu2[n] = post.mu2_quad(n)
    return {"e_s2": e_s2, "e_log": e_log, "mu_mean": mu_mean, "mu2": mu2}


def bayes_estimate_generic(data: Dataset, prior, loss: LossSpec,
                           xtol=1e-10, method="quadrature", seed=0) -> Estimate:
    """Numeric posterior-risk minimization.

    The risk splits into a sigma component and N independent mu components,
    each 1-d and convex: the sigma component is minimized by Brent-style
    search on log sigma2, the mu components are exact quadratics minimized
    at their stationary points.
    """
    post = Posterior(data, prior)
    _require_nondegenerate(post.stats)
    nj = post.N * post.J
    mom = _posterior_moments_for_loss(post, loss, method, seed)
    e_log = mom["e_log"]

    if loss.kind == "reverse_kl":
        e_inv, b, c = mom["e_inv"], mom["b"], mom["c"]

        def risk_sigma(t):
            return 0.5 * nj * (math.exp(t) * e_inv - 1.0 - t + e_log)

        mu_hat = b / e_inv
        mu_risk = 0.5 * post.J * float(np.sum(c - b * b / e_inv))
    else:
        e_s2, mu_hat = mom["e_s2"], mom["mu_mean"]
        s_var = float(np.sum(mom["mu2"] - mu_hat**2))

        def risk_sigma(t):
            return (
                0.5 * nj * (e_s2 * math.exp(-t) - 1.0 - e_log + t)
                + 0.5 * post.J * math.exp(-t) * s_var
            )

        mu_risk = None  # folded into risk_sigma via s_var

    t0 = math.log(max(post.stats.s2, 1e-12))
    t_hat, r_sigma = _minimize_1d(risk_sigma, t0, xtol=xtol)
    sigma2_hat = math.exp(t_hat)
    total = r_sigma + (mu_risk if mu_risk is not None else 0.0)
    return Estimate(
        sigma2_hat,
        mu_hat,
        f"bayes[{loss.kind}]",
        {
            "method": method,
            "risk_at_optimum": total,
            "sigma_risk": r_sigma,
            "xtol": xtol,
        },
    )


# ---------------------------------------------------------------------------
# competitors
# ---------------------------------------------------------------------------

def minekl_estimate(data: Dataset, prior, method="auto") -> Estimate:
    """Forward-KL Bayes estimator; closed path when the marginal is conjugate.

    sigma2_hat = E[sigma2|x] + (1/N) sum_n Var(mu_n|x); mu_hat = E[mu|x].
    Raises RiskDivergent when E[sigma2|x] does not exist.
    """
    post = Posterior(data, prior)
    _require_nondegenerate(post.stats)
    if method == "auto":
        method = "closed_form" if post.has_closed_form() else "quadrature"
    if method == "closed_form":
        try:
            e_s2 = post.expect_closed("sigma2")
            s_var = post.sum_mu_var_closed()
        except MomentDivergent as exc:
            raise RiskDivergent(f"forward-KL risk infinite: {exc}") from exc
        mu_hat = np.array([post.expect_closed("mu", n) for n in range(post.N)])
        sigma2_hat = e_s2 + s_var / post.N
        return Estimate(sigma2_hat, mu_hat, "minekl", {"method": method})
    est = bayes_estimate_generic(data, prior, LossSpec("forward_kl"), method=method)
    return Estimate(est.sigma2_hat, est.mu_hat, "minekl", est.diagnostics)


def mle_estimate(data: Dataset) -> Estimate:
    """sigma2_hat = s2, mu_hat = group means."""
    stats = suff_stats(data)
    _require_nondegenerate(stats)
    return Estimate(stats.s2, stats.means, "mle")


def map_estimate(data: Dataset, prior) -> Estimate:
    """Posterior density maximizer in the (sigma2, mu) parameterization.

    That coordinate convention is part of the estimator's definition here;
    MAP is representation dependent and the experiments exploit exactly that.
    For PowerPrior the stationary point is NJ s2 / (NJ + k + 1) at mu = m;
    the hierarchical prior is profiled numerically.
    """
    post = Posterior(data, prior)
    _require_nondegenerate(post.stats)
    n, j, k = post.N, post.J, prior.exponent_k
    if post._is_power:
        sigma2_hat = n * j * post.stats.s2 / (n * j + k + 1.0)
        return Estimate(sigma2_hat, post.stats.means.copy(), "map")

    def neg_profile(t):
        sigma2 = math.exp(t)
        mu = post.mu_given_sigma(sigma2)[0]
        return -log_posterior_density_sigma2(data, prior, sigma2, mu)

    t_hat, _ = _minimize_1d(neg_profile, math.log(post.stats.s2))
    sigma2_hat = math.exp(t_hat)
    return Estimate(sigma2_hat, post.mu_given_sigma(sigma2_hat)[0], "map")


def log_posterior_density_sigma2(data: Dataset, prior, sigma2, mu) -> float:
    """log unnormalized posterior density w.r.t. d(sigma2) d(mu).

    The prior's sigma factor is declared in d(sigma); the 1/(2 sigma)
    Jacobian moves it to the d(sigma2) measure.
    """
    theta = ParamPoint(sigma2=sigma2, mu=mu)
    return (
        log_likelihood(data, theta)
        + log_prior_density(prior, theta)
        - math.log(2.0 * math.sqrt(sigma2))
    )


def postex_estimate(data: Dataset, prior, functional="sigma2", method="auto") -> Estimate:
    """Coordinatewise posterior expectation.

    functional="sigma2" returns E[sigma2|x]; functional="sigma" returns
    E[sigma|x]^2 (the same estimator applied to the sigma coordinate, mapped
    back, for the non-invariance experiments). mu_hat = E[mu|x].
    """
    if functional not in ("sigma2", "sigma"):
        raise ValueError(f"functional must be sigma2 or sigma, got {functional!r}")
    post = Posterior(data, prior)
    _require_nondegenerate(post.stats)
    if method == "auto":
        method = "closed_form" if post.has_closed_form() else "quadrature"
    ex = post.expect_closed if method == "closed_form" else post.expect_quadrature
    raw = ex(functional)
    sigma2_hat = raw if functional == "sigma2" else raw * raw
    mu_hat = np.array([ex("mu", n) for n in range(post.N)])
    name = "postex" if functional == "sigma2" else "postex_sigma"
    return Estimate(sigma2_hat, mu_hat, name, {"method": method})


def corrected_baseline(data: Dataset) -> Estimate:
    """The classical consistent variance estimator J s2 / (J - 1)."""
    stats = suff_stats(data)
    _require_nondegenerate(stats)
    return Estimate(
        data.n_reps * stats.s2 / (data.n_reps - 1), stats.means, "corrected"
    )
