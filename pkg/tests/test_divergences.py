import math

import numpy as np
import pytest
from scipy import integrate, stats

from nsbayes.divergences import kl_products, kl_single, tv_distance, tv_distance_mc
from nsbayes.model import ParamPoint, rng_from


def kl_quad_oracle(a: ParamPoint, b: ParamPoint, n_groups, n_reps):
    """Direct 1-d integration of the KL integrand, one (n, j) at a time."""
    total = 0.0
    for n in range(n_groups):
        fa = stats.norm(a.mu[n], math.sqrt(a.sigma2))
        fb = stats.norm(b.mu[n], math.sqrt(b.sigma2))
        val, _ = integrate.quad(
            lambda x: fa.pdf(x) * (fa.logpdf(x) - fb.logpdf(x)),
            a.mu[n] - 40 * math.sqrt(a.sigma2), a.mu[n] + 40 * math.sqrt(a.sigma2),
            limit=400,
        )
        total += n_reps * val
    return total


def random_pair(seed, n_max=6):
    rng = rng_from(seed)
    n = int(rng.integers(1, n_max + 1))
    j = int(rng.integers(1, 5))
    a = ParamPoint(float(rng.uniform(0.2, 4.0)), rng.normal(0, 2, n))
    b = ParamPoint(float(rng.uniform(0.2, 4.0)), rng.normal(0, 2, n))
    return a, b, n, j


class TestKl:
    def test_identity_is_zero(self):
        a = ParamPoint(1.3, np.array([0.5, -1.0]))
        assert kl_products(a, a, 2, 3) == pytest.approx(0.0, abs=1e-14)

    def test_hand_value_single_coordinate(self):
        # N=1, J=1, sigma_a2=2, sigma_b2=1, equal means
        a = ParamPoint(2.0, np.array([0.0]))
        b = ParamPoint(1.0, np.array([0.0]))
        expected = 0.5 * (2.0 - 1.0 - math.log(2.0))
        assert expected == pytest.approx(0.15343, abs=5e-6)
        assert kl_products(a, b, 1, 1) == pytest.approx(expected, rel=1e-13)

    def test_hand_value_two_groups(self):
        # N=2, J=2, sigma_a2=1, sigma_b2=2, |mu_a - mu_b|^2 = 1
        a = ParamPoint(1.0, np.array([1.0, 0.0]))
        b = ParamPoint(2.0, np.array([0.0, 0.0]))
        expected = 2.0 * (0.5 - 1.0 - math.log(0.5)) + 0.5 * 1.0
        assert expected == pytest.approx(0.8863, abs=5e-5)
        assert kl_products(a, b, 2, 2) == pytest.approx(expected, rel=1e-13)

    def test_kl_single_hand_value(self):
        a = ParamPoint(1.0, np.array([2.0]))
        b = ParamPoint(4.0, np.array([0.0]))
        expected = 0.5 * (0.25 - 1.0 - math.log(0.25)) + 4.0 / 8.0
        assert expected == pytest.approx(0.8182, abs=1e-4)
        assert kl_single(a, b, 0) == pytest.approx(expected, rel=1e-13)

    @pytest.mark.parametrize("seed", range(6))
    def test_additivity_and_quadrature_oracle(self, seed):
        a, b, n, j = random_pair(seed)
        total = kl_products(a, b, n, j)
        assert total == pytest.approx(
            sum(j * kl_single(a, b, i) for i in range(n)), rel=1e-12
        )
        assert total == pytest.approx(kl_quad_oracle(a, b, n, j), rel=1e-8)

    def test_asymmetry_directions(self):
        a = ParamPoint(1.0, np.array([0.0]))
        b = ParamPoint(3.0, np.array([0.0]))
        assert kl_products(a, b, 1, 1) != pytest.approx(kl_products(b, a, 1, 1))

    def test_length_mismatch_rejected(self):
        a = ParamPoint(1.0, np.array([0.0]))
        b = ParamPoint(1.0, np.array([0.0, 1.0]))
        with pytest.raises(ValueError):
            kl_products(a, b, 2, 2)


class TestTv:
    def test_identity_is_zero(self):
        a = ParamPoint(0.7, np.array([1.0]))
        assert tv_distance(a, a, 1, 2) == pytest.approx(0.0, abs=1e-12)

    def test_equal_sigma_phi_formula(self):
        # TV of two Gaussians with equal variance: 2 Phi(|d|/(2 sigma)) - 1
        a = ParamPoint(1.0, np.array([0.0]))
        b = ParamPoint(1.0, np.array([1.5]))
        expected = 2.0 * stats.norm.cdf(1.5 / 2.0) - 1.0
        assert tv_distance(a, b, 1, 1) == pytest.approx(expected, rel=1e-10)

    def test_large_separation_approaches_one(self):
        a = ParamPoint(1.0, np.array([0.0]))
        b = ParamPoint(1.0, np.array([40.0]))
        assert tv_distance(a, b, 1, 1) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self):
        a = ParamPoint(0.5, np.array([0.0, 1.0]))
        b = ParamPoint(2.0, np.array([0.3, -0.2]))
        assert tv_distance(a, b, 2, 3) == pytest.approx(
            tv_distance(b, a, 2, 3), rel=1e-9
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_monte_carlo_cross_check(self, seed):
        a, b, n, j = random_pair(seed)
        exact = tv_distance(a, b, n, j)
        mc, se = tv_distance_mc(a, b, n, j, count=200_000, seed=seed)
        assert mc == pytest.approx(exact, abs=max(4.0 * se, 1e-4))

    def test_pinsker_bound(self):
        for seed in range(100):
            a, b, n, j = random_pair(seed)
            tv = tv_distance(a, b, n, j)
            bound = math.sqrt(kl_products(a, b, n, j) / 2.0)
            assert tv <= bound + 1e-4, (seed, tv, bound)
