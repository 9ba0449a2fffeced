import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsbayes.errors import MomentDivergent, RiskDivergent
from nsbayes.estimators import (
    LossSpec,
    bayes_estimate_generic,
    corrected_baseline,
    log_posterior_density_sigma2,
    map_estimate,
    minekl_estimate,
    mle_estimate,
    postex_estimate,
    rkl_estimate,
)
from nsbayes.model import Dataset, log_likelihood, ParamPoint, rng_from, simulate, suff_stats
from nsbayes.priors import GaussHierPrior, PowerPrior

from conftest import random_dataset


def minekl_closed_formula(n, j, s2, k):
    # (1 + 1/J) NJ s2 / (N(J-1) + k - 3), from the first-order condition
    return (1.0 + 1.0 / j) * n * j * s2 / (n * (j - 1) + k - 3.0)


class TestRkl:
    def test_e1_k1_value(self, e1):
        est = rkl_estimate(e1, PowerPrior(1.0))
        # NJ s2 / (N(J-1)+k-1) = 4/2
        assert est.sigma2_hat == pytest.approx(2.0, rel=1e-13)
        np.testing.assert_allclose(est.mu_hat, [2.0, 0.0], atol=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_k1_equals_corrected_baseline(self, seed):
        data = random_dataset(seed)
        rkl = rkl_estimate(data, PowerPrior(1.0))
        base = corrected_baseline(data)
        assert rkl.sigma2_hat == pytest.approx(base.sigma2_hat, rel=1e-12)

    def test_method_agreement(self, e1):
        prior = PowerPrior(2.0)
        closed = rkl_estimate(e1, prior, method="closed_form")
        quad = rkl_estimate(e1, prior, method="quadrature")
        imp = rkl_estimate(e1, prior, method="importance")
        assert quad.sigma2_hat == pytest.approx(closed.sigma2_hat, rel=1e-8)
        assert imp.sigma2_hat == pytest.approx(closed.sigma2_hat, rel=0.02)

    def test_gauss_hier_large_tau2_approaches_uniform(self, e1):
        wide = GaussHierPrior(exponent_k=1.0, mu0=0.0, tau2=1e8, rho=0.0,
                              scale_by_sigma=False)
        est = rkl_estimate(e1, wide)
        target = rkl_estimate(e1, PowerPrior(1.0)).sigma2_hat
        assert est.sigma2_hat == pytest.approx(target, rel=1e-4)

    def test_degenerate_dataset_rejected(self):
        data = Dataset(np.full((3, 2), 1.0))
        with pytest.raises(MomentDivergent):
            rkl_estimate(data, PowerPrior(1.0))

    def test_generic_optimizer_agrees(self, e1):
        prior = PowerPrior(2.0)
        closed = rkl_estimate(e1, prior).sigma2_hat
        generic = bayes_estimate_generic(e1, prior, LossSpec("reverse_kl"))
        assert generic.sigma2_hat == pytest.approx(closed, rel=1e-6)
        assert generic.diagnostics["risk_at_optimum"] >= 0.0


class TestMinEkl:
    def test_closed_formula(self, e1):
        est = minekl_estimate(e1, PowerPrior(4.0))
        assert est.sigma2_hat == pytest.approx(
            minekl_closed_formula(2, 2, 1.0, 4.0), rel=1e-12
        )

    def test_risk_divergent_k1(self, e1):
        with pytest.raises(RiskDivergent):
            minekl_estimate(e1, PowerPrior(1.0))
        with pytest.raises(RiskDivergent):
            bayes_estimate_generic(e1, PowerPrior(1.0), LossSpec("forward_kl"))

    def test_generic_optimizer_agrees(self, e1):
        prior = PowerPrior(5.0)
        closed = minekl_estimate(e1, prior, method="closed_form")
        generic = bayes_estimate_generic(e1, prior, LossSpec("forward_kl"))
        assert generic.sigma2_hat == pytest.approx(closed.sigma2_hat, rel=1e-6)

    def test_asymptotic_inconsistency(self):
        # k=4, N large: -> (1 + 1/J) * J s2 / (J-1) -> (J+1)/J sigma2 = 1.5
        data = simulate(10_000, 2, 1.0, 0.0, seed=21)
        est = minekl_estimate(data, PowerPrior(4.0))
        assert est.sigma2_hat == pytest.approx(1.5, rel=0.05)


class TestMle:
    def test_e1(self, e1):
        est = mle_estimate(e1)
        assert est.sigma2_hat == 1.0
        np.testing.assert_allclose(est.mu_hat, [2.0, 0.0])

    def test_is_local_maximum(self, e1):
        est = mle_estimate(e1)
        best = log_likelihood(e1, ParamPoint(est.sigma2_hat, est.mu_hat))
        eps = 1e-4
        for ds in (-eps, eps):
            assert log_likelihood(e1, ParamPoint(est.sigma2_hat + ds, est.mu_hat)) < best
            for n in range(2):
                mu = est.mu_hat.copy()
                mu[n] += ds
                assert log_likelihood(e1, ParamPoint(est.sigma2_hat, mu)) < best

    def test_large_n_limit(self):
        data = simulate(10_000, 2, 1.0, 0.0, seed=3)
        assert mle_estimate(data).sigma2_hat == pytest.approx(0.5, rel=0.05)


class TestMap:
    def test_e1_k1(self, e1):
        # NJ s2 / (NJ + k + 1) = 4/6
        assert map_estimate(e1, PowerPrior(1.0)).sigma2_hat == pytest.approx(
            4.0 / 6.0, rel=1e-13
        )

    def test_k_minus1_equals_mle(self):
        # prior density sigma in d(sigma) is flat in sigma2: MAP = MLE
        # (E1 itself is excluded: N(J-1) + k = 1 makes the marginal improper)
        data = simulate(4, 2, 1.0, 0.0, seed=5)
        assert map_estimate(data, PowerPrior(-1.0)).sigma2_hat == pytest.approx(
            mle_estimate(data).sigma2_hat, rel=1e-12
        )

    def test_formula_matches_numeric_argmax(self, e1):
        from scipy import optimize
        prior = PowerPrior(2.0)
        est = map_estimate(e1, prior)
        mu = suff_stats(e1).means
        res = optimize.minimize_scalar(
            lambda t: -log_posterior_density_sigma2(e1, prior, math.exp(t), mu),
            bounds=(-10, 10), method="bounded", options={"xatol": 1e-12},
        )
        assert est.sigma2_hat == pytest.approx(math.exp(res.x), rel=1e-8)

    def test_gauss_hier_numeric(self, e1):
        prior = GaussHierPrior(exponent_k=1.0, mu0=0.0, tau2=2.0, rho=0.3,
                               scale_by_sigma=False)
        est = map_estimate(e1, prior)
        assert est.sigma2_hat > 0
        # perturbation check around the reported maximum
        best = log_posterior_density_sigma2(e1, prior, est.sigma2_hat, est.mu_hat)
        for ds in (-1e-4, 1e-4):
            assert log_posterior_density_sigma2(
                e1, prior, est.sigma2_hat * (1 + ds), est.mu_hat
            ) <= best + 1e-12


class TestPostEx:
    def test_sigma2_e1_k3(self, e1):
        assert postex_estimate(e1, PowerPrior(3.0)).sigma2_hat == pytest.approx(
            2.0, rel=1e-13
        )

    def test_non_invariance_witness(self, e1):
        # E[sigma|x]^2 = pi/2 vs E[sigma2|x] = 2.0 with k=3
        sq = postex_estimate(e1, PowerPrior(3.0), functional="sigma")
        assert sq.estimator_name == "postex_sigma"
        assert sq.sigma2_hat == pytest.approx(math.pi / 2.0, rel=1e-12)
        assert sq.sigma2_hat == pytest.approx(1.5708, abs=1e-4)
        direct = postex_estimate(e1, PowerPrior(3.0)).sigma2_hat
        assert abs(sq.sigma2_hat - direct) / direct >= 0.20

    def test_divergent_k1(self, e1):
        with pytest.raises(MomentDivergent):
            postex_estimate(e1, PowerPrior(1.0))


class TestCorrectedBaseline:
    def test_e1(self, e1):
        assert corrected_baseline(e1).sigma2_hat == pytest.approx(2.0, rel=1e-15)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_j2_is_twice_s2(self, seed):
        data = random_dataset(seed, j_max=2)
        if data.n_reps != 2:
            return
        assert corrected_baseline(data).sigma2_hat == pytest.approx(
            2.0 * suff_stats(data).s2, rel=1e-14
        )

    def test_consistency(self):
        data = simulate(10_000, 2, 1.0, 0.0, seed=17)
        assert corrected_baseline(data).sigma2_hat == pytest.approx(1.0, rel=0.05)
