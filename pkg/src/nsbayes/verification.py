"""Built-in property suites behind the `verify` CLI command.

Each suite returns {"name", "passed", "max_deviation", "details"}; the CLI
prints one line per suite and fails the process if any suite fails.
"""

import math

import numpy as np

from .divergences import kl_products, tv_distance
from .estimators import rkl_estimate, postex_estimate
from .experiments import REPARAMS, rkl_estimate_transformed
from .model import Dataset, ParamPoint, rng_from, simulate
from .posterior import Posterior
from .priors import GaussHierPrior, PowerPrior
from .reference import ReferenceDistribution, fit_reference, rkl_via_reference
from .errors import OptimizerFailed
from .estimators import _minimize_1d
from .reference import kl_to_reference


def _random_instances(seed, count):
    """Random (dataset, prior) pairs across both prior families."""
    out = []
    for i in range(count):
        rng = rng_from(seed, i)
        n = int(rng.integers(2, 12))
        j = int(rng.integers(2, 6))
        sigma2 = float(rng.uniform(0.3, 3.0))
        mu = rng.normal(0.0, 2.0, size=n)
        data = simulate(n, j, sigma2, mu, rng=rng)
        if i % 2 == 0:
            prior = PowerPrior(exponent_k=float(rng.uniform(1.0, 4.0)))
        else:
            prior = GaussHierPrior(
                exponent_k=float(rng.uniform(0.0, 3.0)),
                mu0=float(rng.normal(0.0, 1.0)),
                tau2=float(rng.uniform(0.5, 4.0)),
                rho=float(rng.uniform(-0.8, 0.9)),
                scale_by_sigma=bool(rng.integers(0, 2)),
            )
        out.append((data, prior))
    return out


def reference_equivalence(seed=2024, count=50, tol=1e-6, perturb=0.0):
    """Reference-distribution argmin equals the direct reverse-KL estimate.

    perturb scales the fitted reference precision (self-test hook: a 1%
    perturbation must break the equivalence).
    """
    worst = 0.0
    for data, prior in _random_instances(seed, count):
        direct = rkl_estimate(data, prior)
        mu_dev = 0.0
        if perturb == 0.0:
            via = rkl_via_reference(data, prior)
            s2_via = via.sigma2_hat
            mu_dev = float(np.max(np.abs(via.mu_hat - direct.mu_hat)))
        else:
            ref = fit_reference(data, prior)
            ref = ReferenceDistribution(
                precision=ref.precision * (1.0 + perturb),
                means=ref.means, log_normalizer=ref.log_normalizer,
                n_reps=ref.n_reps,
            )
            t_hat, _ = _minimize_1d(
                lambda t: kl_to_reference(math.exp(t), ref.means, ref),
                -math.log(ref.precision),
            )
            s2_via = math.exp(t_hat)
        dev = abs(s2_via - direct.sigma2_hat) / direct.sigma2_hat
        worst = max(worst, dev, mu_dev)
    return {
        "name": "reference_equivalence",
        "passed": worst <= tol,
        "max_deviation": worst,
        "details": f"{count} randomized (dataset, prior) instances, tol {tol:g}",
    }


def integration_agreement(seed=7, count=6, tol=1e-6, importance_samples=100_000):
    """closed form vs quadrature (tight) and vs importance (3 MC ses)."""
    worst_quad = 0.0
    worst_is_z = 0.0
    functionals = ["inv_sigma2", "sigma2", "sigma", "log_sigma2", "mu", "mu_over_sigma2"]
    for data, prior in _random_instances(seed, count):
        post = Posterior(data, prior)
        if not post.has_closed_form():
            continue
        sample = post.importance_sample(importance_samples, seed=seed)
        for phi in functionals:
            group = 0 if phi in ("mu", "mu_over_sigma2") else None
            closed = post.expect_closed(phi, group)
            quad = post.expect_quadrature(phi, group)
            scale = max(abs(closed), 1e-12)
            worst_quad = max(worst_quad, abs(quad - closed) / scale)
            est, se = sample.expect(phi, group)
            if se > 0:
                worst_is_z = max(worst_is_z, abs(est - closed) / se)
    passed = worst_quad <= tol and worst_is_z <= 3.0
    return {
        "name": "integration_agreement",
        "passed": passed,
        "max_deviation": worst_quad,
        "details": (
            f"max |quad-closed|/|closed| = {worst_quad:.3g} (tol {tol:g}); "
            f"max importance z-score = {worst_is_z:.2f} (limit 3)"
        ),
    }


def pinsker(seed=11, n_pairs=100, tv_tol=1e-4):
    """tv <= sqrt(kl/2) on random parameter pairs."""
    worst = -math.inf
    rng = rng_from(seed)
    for _ in range(n_pairs):
        n = int(rng.integers(1, 6))
        j = int(rng.integers(1, 5))
        a = ParamPoint(float(rng.uniform(0.2, 4.0)), rng.normal(0, 2, n))
        b = ParamPoint(float(rng.uniform(0.2, 4.0)), rng.normal(0, 2, n))
        tv = tv_distance(a, b, n, j)
        kl = kl_products(a, b, n, j)
        worst = max(worst, tv - math.sqrt(kl / 2.0))
    return {
        "name": "pinsker",
        "passed": worst <= tv_tol,
        "max_deviation": worst,
        "details": f"max (tv - sqrt(kl/2)) over {n_pairs} pairs; slack {tv_tol:g}",
    }


def invariance(seed=13, tol=1e-6):
    """RKL commutes with the three reparameterizations; PostEx does not."""
    rng = rng_from(seed)
    data = simulate(4, 3, 1.3, rng.normal(0, 1, 4), rng=rng)
    prior = PowerPrior(exponent_k=2.0)
    base = rkl_estimate(data, prior).sigma2_hat
    worst = 0.0
    for rp in REPARAMS.values():
        eta = rkl_estimate_transformed(data, prior, rp)
        worst = max(worst, abs(rp.forward(base) - eta) / abs(rp.forward(base)))

    # non-invariance witness: E[sigma|x]^2 vs E[sigma2|x] on a k=3 posterior
    e1 = Dataset(np.array([[1.0, 3.0], [-1.0, 1.0]]))
    p3 = PowerPrior(exponent_k=3.0)
    via_sigma2 = postex_estimate(e1, p3, "sigma2").sigma2_hat
    via_sigma = postex_estimate(e1, p3, "sigma").sigma2_hat
    witness_gap = abs(via_sigma - via_sigma2) / via_sigma2
    passed = worst <= tol and witness_gap >= 0.20
    return {
        "name": "invariance",
        "passed": passed,
        "max_deviation": worst,
        "details": (
            f"max RKL transform gap {worst:.3g} (tol {tol:g}); "
            f"PostEx sigma-vs-sigma2 witness gap {witness_gap:.3f} (need >= 0.20)"
        ),
    }


def run_all(seed=2024, perturb=0.0):
    return [
        reference_equivalence(seed=seed, perturb=perturb),
        integration_agreement(),
        pinsker(),
        invariance(),
    ]
