"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with the measured quantity next to its threshold.

Criteria 2, 3 and 9 share moderately large simulation runs (N up to 10^4,
several master seeds); module-scoped fixtures run each of those once.
"""

import math

import numpy as np
import pytest

from nsbayes import verification
from nsbayes.estimators import (
    corrected_baseline,
    postex_estimate,
    rkl_estimate,
)
from nsbayes.experiments import (
    REPARAMS,
    ExperimentSpec,
    rkl_estimate_transformed,
    run_consistency,
    run_tail_mass,
)
from nsbayes.model import rng_from, simulate
from nsbayes.priors import GaussHierPrior, PowerPrior

from conftest import random_dataset

SEEDS = list(range(10))
N_GRID = [100, 1000, 10_000]
POWER_KS = (1.0, 2.0, 4.0)


def report(num, name, ok, detail):
    line = f"ACCEPTANCE {num} ({name}): {'PASS' if ok else 'FAIL'} -- {detail}"
    print(line)
    assert ok, line


def power_table(seed):
    spec = ExperimentSpec(
        kind="consistency",
        N_grid=N_GRID,
        J=2,
        true_sigma2=1.0,
        priors=[{"family": "power", "k": k} for k in POWER_KS],
        estimators=["rkl", "mle", "map", "minekl"],
        replicates=20,
        master_seed=seed,
        mu_mode={"normal": {"mean": 0.0, "sd": 1.0}},
    )
    return run_consistency(spec)


def hier_table(seed):
    spec = ExperimentSpec(
        kind="consistency",
        N_grid=N_GRID,
        J=2,
        true_sigma2=1.0,
        priors=[{"family": "gauss-hier", "k": 1.0, "rho": 0.9, "tau2": 1.0,
                 "scale_by_sigma": True}],
        estimators=["rkl"],
        replicates=20,
        master_seed=seed,
        mu_mode="prior",
    )
    return run_consistency(spec)


@pytest.fixture(scope="module")
def power_tables():
    return {seed: power_table(seed) for seed in SEEDS}


@pytest.fixture(scope="module")
def hier_tables():
    return {seed: hier_table(seed) for seed in SEEDS}


def median_abs_error(table, estimator, prior_label, n):
    vals = [abs(r.sigma2_hat - 1.0) for r in table.rows
            if r.estimator == estimator and r.prior_label == prior_label
            and r.N == n and r.status == "ok"]
    return float(np.median(vals))


def test_criterion_1_exact_identity():
    """rkl with k=1 equals the corrected baseline J s2/(J-1) exactly."""
    worst = 0.0
    for seed in range(100):
        data = random_dataset(seed, n_max=50)
        a = rkl_estimate(data, PowerPrior(1.0)).sigma2_hat
        b = corrected_baseline(data).sigma2_hat
        worst = max(worst, abs(a - b) / b)
    report(1, "exact identity to corrected baseline", worst <= 1e-12,
           f"max relative gap {worst:.3g} over 100 datasets (tol 1e-12)")


def test_criterion_2_consistency(power_tables, hier_tables):
    """RKL medians near 1 at N=1e4; median |error| decreasing in N."""
    labels = [(power_tables, f"power(k={k:g})") for k in POWER_KS]
    labels.append((hier_tables,
                   "gauss-hier(k=1, mu0=0, tau2=1*sigma2, rho=0.9)"))
    med_ok, details, monotone_frac = True, [], []
    for tables, label in labels:
        medians = [tables[s].median_by("rkl", label, 10_000) for s in SEEDS]
        in_range = all(0.95 <= m <= 1.05 for m in medians)
        med_ok &= in_range
        mono = [
            all(b < a for a, b in zip(curve, curve[1:]))
            for curve in (
                [median_abs_error(tables[s], "rkl", label, n) for n in N_GRID]
                for s in SEEDS
            )
        ]
        frac = sum(mono) / len(mono)
        monotone_frac.append(frac)
        details.append(f"{label}: median(N=1e4) in [{min(medians):.4f}, "
                       f"{max(medians):.4f}], monotone {frac:.0%} of seeds")
    ok = med_ok and all(f >= 0.9 for f in monotone_frac)
    report(2, "RKL consistency", ok, "; ".join(details))


def test_criterion_3_competitor_inconsistency(power_tables):
    """MLE and MAP(k=1) pin to (J-1)/J; minEKL(k=4) to (J+1)/J."""
    checks = [("mle", "power(k=1)", 0.47, 0.53),
              ("map", "power(k=1)", 0.47, 0.53),
              ("minekl", "power(k=4)", 1.42, 1.58)]
    ok, details = True, []
    for est, label, lo, hi in checks:
        medians = [power_tables[s].median_by(est, label, 10_000) for s in SEEDS]
        good = all(lo <= m <= hi for m in medians)
        ok &= good
        details.append(f"{est}|{label}: [{min(medians):.4f}, {max(medians):.4f}] "
                       f"vs [{lo}, {hi}]")
    report(3, "competitor inconsistency", ok, "; ".join(details))


def test_criterion_4_prior_robustness():
    """RKL spread across k in {1,2,4} on one N=1e4 dataset below 1e-3."""
    data = simulate(10_000, 2, 1.0, rng_from(404).standard_normal(10_000),
                    seed=404)
    vals = [rkl_estimate(data, PowerPrior(k)).sigma2_hat for k in POWER_KS]
    spread = max(vals) - min(vals)
    report(4, "prior robustness", spread < 1e-3,
           f"spread {spread:.3e} across k in {POWER_KS} (tol 1e-3)")


def test_criterion_5_invariance(e1):
    """RKL commutes with sqrt/log/reciprocal; PostEx visibly does not."""
    instances = [
        (e1, PowerPrior(2.0)),
        (e1, PowerPrior(3.0)),
        (simulate(5, 3, 1.4, np.arange(5, dtype=float), seed=55),
         GaussHierPrior(exponent_k=1.0, mu0=0.0, tau2=1.0, rho=0.5,
                        scale_by_sigma=True)),
    ]
    worst = 0.0
    for data, prior in instances:
        base = rkl_estimate(data, prior).sigma2_hat
        for rp in REPARAMS.values():
            target = rp.forward(base)
            eta = rkl_estimate_transformed(data, prior, rp)
            gap = abs(eta - target) / max(1.0, abs(target))
            worst = max(worst, gap)
    sq = postex_estimate(e1, PowerPrior(3.0), functional="sigma").sigma2_hat
    direct = postex_estimate(e1, PowerPrior(3.0)).sigma2_hat
    witness = abs(sq - direct) / direct
    ok = (worst <= 1e-6 and witness >= 0.20
          and sq == pytest.approx(1.5708, abs=1e-4)
          and direct == pytest.approx(2.0, rel=1e-12))
    report(5, "reparameterization invariance", ok,
           f"max RKL gap {worst:.2e} (tol 1e-6); PostEx witness "
           f"{sq:.4f} vs {direct:.4f} ({witness:.0%} gap, need >= 20%)")


def test_criterion_6_reference_equivalence():
    """Direct RKL equals the reference-distribution argmin route."""
    result = verification.reference_equivalence(count=50, tol=1e-6)
    report(6, "reference-distribution equivalence", result["passed"],
           f"max deviation {result['max_deviation']:.3g} over 50 instances "
           "(tol 1e-6)")


def test_criterion_7_integration_agreement():
    """Closed form vs quadrature vs importance sampling, all functionals."""
    result = verification.integration_agreement(importance_samples=100_000)
    report(7, "integration oracle agreement", result["passed"],
           result["details"])


def test_criterion_8_pinsker():
    """tv_distance <= sqrt(kl_products / 2) on 100 random pairs."""
    result = verification.pinsker(n_pairs=100, tv_tol=1e-4)
    report(8, "Pinsker bound", result["passed"],
           f"max tv - sqrt(kl/2) = {result['max_deviation']:.3g} "
           "(must be <= 1e-4)")


def test_criterion_9_tail_mass():
    """Small-sigma share of the E[1/sigma2|x] numerator vanishes with N."""
    spec = ExperimentSpec(
        kind="tail_mass",
        N_grid=[10, 100, 1000, 10_000],
        J=2,
        true_sigma2=1.0,
        priors=[{"family": "power", "k": 1.0}],
        estimators=[],
        replicates=20,
        master_seed=909,
        mu_mode={"normal": {"mean": 0.0, "sd": 1.0}},
    )
    table = run_tail_mass(spec)
    decreasing = table.meta["monotone_decreasing"]
    n_mono = sum(decreasing.values())
    final_logs = [v[-1] for v in table.meta["log_fraction"].values()]
    max_final = max(final_logs)
    ok = n_mono >= 19 and max_final < math.log(1e-10)
    report(9, "tail-mass vanishing", ok,
           f"decreasing in {n_mono}/20 replicates (need >= 19); max log "
           f"fraction at N=1e4 is {max_final:.1f} (need < {math.log(1e-10):.1f})")
