"""Posterior functionals E[phi(sigma2, mu) | x] in the log domain.

mu is always integrated out analytically (Gaussian conditionals), leaving
1-d integrals over t = log sigma. Three interchangeable methods:

  closed_form  gamma-moment identities of the conjugate sigma-marginal
               sigma^(-c) exp(-A / sigma^2); exact, authoritative when it
               exists (PowerPrior, and GaussHierPrior with scale_by_sigma)
  quadrature   adaptive integration over t = log sigma, truncated where the
               log-integrand drops 60 nats below its peak, with a
               bound-doubling divergence check
  importance   self-normalized sampling, sigma2 from an inverse-gamma
               proposal fitted to the marginal, mu from its exact Gaussian
               conditional
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import integrate, optimize, special, stats
from scipy.linalg import cholesky_banded, solveh_banded

from .errors import InvalidPrior, MethodUnavailable, MomentDivergent
from .model import Dataset, rng_from, suff_stats
from .priors import (
    GaussHierPrior,
    PowerPrior,
    ar1_logdet_corr,
    ar1_matvec,
    ar1_precision_bands,
    validate_prior,
)

_LOG_2PI = math.log(2.0 * math.pi)

# truncation: integrand counted as zero once this far (nats) below its peak
_WINDOW_NATS = 60.0
# bound-doubling stabilization threshold for divergence detection
_STABLE_REL = 1e-8

SCALAR_FUNCTIONALS = ("inv_sigma2", "sigma2", "sigma", "log_sigma2")
GROUP_FUNCTIONALS = ("mu", "mu_over_sigma2")


@dataclass(frozen=True)
class FunctionalRequest:
    """A named posterior functional and how to compute it."""

    phi: str
    group: int | None = None
    method: str = "auto"
    tolerance: float = 1e-9
    sample_count: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.phi not in SCALAR_FUNCTIONALS + GROUP_FUNCTIONALS:
            raise ValueError(f"unknown functional {self.phi!r}")
        if self.phi in GROUP_FUNCTIONALS and self.group is None:
            raise ValueError(f"functional {self.phi!r} needs a group index")
        if self.phi in SCALAR_FUNCTIONALS and self.group is not None:
            raise ValueError(f"functional {self.phi!r} takes no group index")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class ExpectationResult:
    value: float
    method: str
    stderr: float | None = None
    diagnostics: dict | None = None


# ---------------------------------------------------------------------------
# symmetric tridiagonal helpers (banded storage: row 0 = superdiag, row 1 = diag)
# ---------------------------------------------------------------------------

def _banded(diag, off):
    ab = np.zeros((2, len(diag)))
    ab[1] = diag
    if len(off):
        ab[0, 1:] = off
    return ab


def _tridiag_solve(diag, off, b):
    return solveh_banded(_banded(diag, off), b)


def _tridiag_logdet(diag, off):
    c = cholesky_banded(_banded(diag, off))
    return 2.0 * float(np.sum(np.log(c[1])))


def _tridiag_inv_diag(diag, off):
    """Diagonal of the inverse of an SPD tridiagonal matrix, O(N).

    Two-sided LDL pivots: r_i forward, l_i backward; (M^-1)_ii = 1/(r_i + l_i - d_i).
    """
    n = len(diag)
    if n == 1:
        return np.array([1.0 / diag[0]])
    r = np.empty(n)
    l = np.empty(n)
    r[0] = diag[0]
    for i in range(1, n):
        r[i] = diag[i] - off[i - 1] ** 2 / r[i - 1]
    l[-1] = diag[-1]
    for i in range(n - 2, -1, -1):
        l[i] = diag[i] - off[i] ** 2 / l[i + 1]
    return 1.0 / (r + l - diag)


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------

class Posterior:
    """All posterior structure for one (dataset, prior) pair.

    Exposes the sigma-marginal log density (mu integrated out), the Gaussian
    conditional of mu given sigma, and the expectation methods.
    """

    def __init__(self, data: Dataset, prior, check_valid=True):
        self.data = data
        self.prior = prior
        self.stats = suff_stats(data)
        self.N = data.n_groups
        self.J = data.n_reps
        if check_valid:
            verdict = validate_prior(prior, self.N, self.J)
            if not verdict.valid:
                raise InvalidPrior(verdict.reason)

        n, j, k = self.N, self.J, prior.exponent_k
        s2, m = self.stats.s2, self.stats.means
        self._is_power = isinstance(prior, PowerPrior)

        if self._is_power:
            # marginal: sigma^(N - NJ - k) exp(-NJ s2 / (2 sigma^2))
            self.conjugate = (n * (j - 1) + k, 0.5 * n * j * s2)
            self._mu_star = m.copy()
            self._vfac = np.full(n, 1.0 / j)  # Var(mu_n | sigma) / sigma^2
        elif prior.scale_by_sigma:
            # mu | sigma ~ N(mu0, sigma^2 tau2 C); posterior precision of mu
            # is (1/sigma^2)(J I + Q / tau2): conditional mean is sigma-free.
            qd, qo = ar1_precision_bands(prior.rho, n)
            pd = j + qd / prior.tau2
            po = qo / prior.tau2
            d = m - prior.mu0
            # marginal: sigma^(-NJ - k) exp(-B / (2 sigma^2)),
            # B = NJ s2 + d' K^-1 d with K = I/J + tau2 C
            qf = self._aI_bC_quadform(1.0 / j, prior.tau2, d)
            self.conjugate = (n * j + k, 0.5 * (n * j * s2 + qf))
            rhs = j * m + ar1_matvec(prior.rho, np.full(n, prior.mu0)) / prior.tau2
            self._mu_star = _tridiag_solve(pd, po, rhs)
            self._vfac = _tridiag_inv_diag(pd, po)
        else:
            self.conjugate = None
            self._mu_star = None
            self._vfac = None
            self._qd, self._qo = ar1_precision_bands(prior.rho, n)
            self._d = m - prior.mu0
            self._qw = ar1_matvec(prior.rho, self._d)
            self._ldq = ar1_logdet_corr(prior.rho, n)

        self._t_hint = self._mode_hint()
        self._t_memo = {}      # scalar log_density_t cache (non-conjugate path)
        self._log_den_memo = {}  # denominator integral keyed by rel_tol

    # -- mu | sigma ---------------------------------------------------------

    def _aI_bC_quadform(self, a, b, d):
        """d' (a I + b C)^-1 d via (a Q + b I)^-1 Q, O(N)."""
        qd, qo = ar1_precision_bands(self.prior.rho, self.N)
        w = ar1_matvec(self.prior.rho, d)
        z = _tridiag_solve(a * qd + b, a * qo, w)
        return float(d @ z)

    def mu_given_sigma(self, sigma2):
        """(mean vector, variance vector) of mu | sigma, x."""
        if self.conjugate is not None:
            return self._mu_star, sigma2 * self._vfac
        p = self.prior
        pd = self.J / sigma2 + self._qd / p.tau2
        po = self._qo / p.tau2
        rhs = (self.J / sigma2) * self.stats.means + ar1_matvec(
            p.rho, np.full(self.N, p.mu0)
        ) / p.tau2
        return _tridiag_solve(pd, po, rhs), _tridiag_inv_diag(pd, po)

    # -- sigma marginal ------------------------------------------------------

    def log_sigma_density(self, sigma):
        """log unnormalized posterior density of sigma (d sigma measure)."""
        n, j, k = self.N, self.J, self.prior.exponent_k
        if self.conjugate is not None:
            c, a = self.conjugate
            with np.errstate(over="ignore"):
                return -c * np.log(sigma) - a / (sigma * sigma)
        # GaussHierPrior, covariance fixed in sigma: Gaussian convolution
        # N(m | mu0 1, (sigma^2/J) I + tau2 C), all determinants tridiagonal.
        sigma = np.asarray(sigma, dtype=float)
        scalar = sigma.ndim == 0
        sig = np.atleast_1d(sigma)
        p = self.prior
        d = self.stats.means - p.mu0
        out = np.empty(len(sig))
        with np.errstate(over="ignore"):
            base = (
                -k * np.log(sig)
                - 0.5 * n * j * np.log(2 * math.pi * sig**2)
                + 0.5 * n * np.log(2 * math.pi * sig**2 / j)
                - 0.5 * n * j * self.stats.s2 / sig**2
            )
        logdet_q = -ar1_logdet_corr(p.rho, n)
        for i, s in enumerate(sig):
            a = s * s / j
            if not math.isfinite(a):
                out[i] = -math.inf
                continue
            qf = self._aI_bC_quadform(a, p.tau2, d)
            # log det(aI + bC) = log det(aQ + bI) - log det Q
            ld = _tridiag_logdet(a * self._qd + p.tau2, a * self._qo) - logdet_q
            out[i] = -0.5 * (n * _LOG_2PI + ld + qf)
        out += base
        return float(out[0]) if scalar else out

    def log_density_t(self, t):
        """Density of t = log sigma (includes the d sigma = e^t dt factor).

        The conjugate branch works directly in t, so it stays finite for any
        t and the truncation logic never sees float-overflow cliffs.
        """
        if self.conjugate is not None:
            c, a = self.conjugate
            return -(c - 1.0) * t - a * np.exp(-2.0 * t)
        t = float(t)
        v = self._t_memo.get(t)
        if v is None:
            v = self._nonconj_log_density_t(t)
            self._t_memo[t] = v
        return v

    def _nonconj_log_density_t(self, t):
        """Scalar non-conjugate log density of t; same math as log_sigma_density."""
        if t > 350.0:  # sigma**2 would overflow; the density is long gone
            return -math.inf
        n, j, p = self.N, self.J, self.prior
        a = math.exp(2.0 * t) / j
        qf = float(self._d @ _tridiag_solve(a * self._qd + p.tau2, a * self._qo, self._qw))
        ld = _tridiag_logdet(a * self._qd + p.tau2, a * self._qo) + self._ldq
        base = (
            -p.exponent_k * t
            - 0.5 * n * j * (_LOG_2PI + 2.0 * t)
            + 0.5 * n * (_LOG_2PI + 2.0 * t - math.log(j))
            - 0.5 * n * j * self.stats.s2 * math.exp(-2.0 * t)
        )
        return base - 0.5 * (n * _LOG_2PI + ld + qf) + t

    def _mode_hint(self):
        if self.conjugate is not None:
            c, a = self.conjugate
            return 0.5 * math.log(2.0 * a / max(c - 1.0, 1e-9)) if a > 0 else 0.0
        # power-like guess ignoring the mu covariance detail
        n, j, k = self.N, self.J, self.prior.exponent_k
        a = 0.5 * n * j * max(self.stats.s2, 1e-12)
        return 0.5 * math.log(2.0 * a / (n * j + k - 1.0))

    # -- quadrature ----------------------------------------------------------

    def _log_weighted(self, log_phi_slope):
        """t -> log density_t(t) + slope * t (power-of-sigma weights)."""
        def lw(t):
            return self.log_density_t(t) + log_phi_slope * t
        return lw

    def _window(self, lw, hint):
        """Peak and 60-nat truncation window of a log-integrand over t."""
        grid = hint + np.linspace(-40.0, 40.0, 321)
        vals = np.array([lw(t) for t in grid])
        i = int(np.argmax(vals))
        lo_b = grid[max(i - 1, 0)]
        hi_b = grid[min(i + 1, len(grid) - 1)]
        res = optimize.minimize_scalar(lambda t: -lw(t), bounds=(lo_b, hi_b), method="bounded")
        t_peak, peak = float(res.x), float(-res.fun)
        cut = peak - _WINDOW_NATS

        def walk(direction):
            step, t = 0.25, t_peak
            for _ in range(400):
                t += direction * step
                if lw(t) < cut:
                    return t
                step = min(step * 1.6, 64.0)
            return None

        lo = walk(-1.0)
        hi = walk(+1.0)
        return t_peak, peak, lo, hi

    def _integrate(self, lw, factor=None, rel_tol=1e-10, hint=None, lo=None, hi=None,
                   allow_divergent_check=True):
        """log-domain integral of exp(lw(t)) * factor(t) over the window.

        factor, when given, must be bounded and O(1); large dynamic range
        belongs in lw. Returns (log_abs, sign).
        """
        t_peak, peak, wlo, whi = self._window(lw, self._t_hint if hint is None else hint)
        if whi is None:
            raise MomentDivergent("log-integrand never decays on the upper side")
        if wlo is None:  # cannot happen for s2 > 0, guard anyway
            raise MomentDivergent("log-integrand never decays on the lower side")
        # explicit bounds, when given, override the window
        a = wlo if lo is None else lo
        b = whi if hi is None else hi
        if a >= b:
            return -math.inf, 0.0
        # local shift for this integration range
        grid = np.linspace(a, b, 257)
        gv = np.array([lw(t) for t in grid])
        if factor is not None:
            fv = np.array([factor(t) for t in grid])
            mag = gv + np.log(np.abs(fv) + 1e-300)
        else:
            mag = gv
        shift = float(np.max(mag))
        if not np.isfinite(shift):
            return -math.inf, 0.0

        if factor is None:
            fn = lambda t: math.exp(lw(t) - shift)
        else:
            fn = lambda t: factor(t) * math.exp(lw(t) - shift)
        pts = [t_peak] if a < t_peak < b else None
        val, _ = integrate.quad(fn, a, b, points=pts, limit=400,
                                epsrel=rel_tol, epsabs=1e-290)

        if allow_divergent_check and hi is None:
            # the 60-nat cutoff can hide slow divergence: double the upper
            # bound three times and require the running integral to stabilize
            width = b - a
            total, edge = val, b
            for _ in range(3):
                new_edge = edge + width
                width *= 2.0
                extra, _ = integrate.quad(fn, edge, new_edge, limit=200,
                                          epsrel=rel_tol, epsabs=1e-290)
                total += extra
                edge = new_edge
            if abs(total - val) > _STABLE_REL * max(abs(total), 1e-300):
                raise MomentDivergent("integral fails to stabilize under bound doubling")
            val = total
        if val == 0.0:
            return -math.inf, 0.0
        return shift + math.log(abs(val)), math.copysign(1.0, val)

    def _quad_parts(self, phi, group, rel_tol):
        """(slope, factor) decomposition of the conditional functional.

        E[phi | x] = E_t[ exp(slope * t) * factor(t) ] with factor bounded.
        """
        if phi == "inv_sigma2":
            return -2.0, None
        if phi == "sigma2":
            return 2.0, None
        if phi == "sigma":
            return 1.0, None
        if phi == "log_sigma2":
            return 0.0, lambda t: 2.0 * t
        if phi == "mu":
            return 0.0, self._mu_mean_factor(group)
        if phi == "mu_over_sigma2":
            return -2.0, self._mu_mean_factor(group)
        raise ValueError(phi)

    def _mu_mean_factor(self, group):
        # clamp: beyond exp(700) the density is zero anyway, avoid overflow
        def factor(t):
            return float(self.mu_given_sigma(math.exp(min(2.0 * t, 700.0)))[0][group])
        return factor

    def expect_quadrature(self, phi, group=None, rel_tol=1e-10):
        slope, factor = self._quad_parts(phi, group, rel_tol)
        return self._expect_ratio(slope, factor, rel_tol)

    def _log_denominator(self, rel_tol):
        """Normalizing integral, cached: identical across functionals."""
        key = rel_tol
        if key not in self._log_den_memo:
            log_den, _ = self._integrate(self._log_weighted(0.0), rel_tol=rel_tol)
            self._log_den_memo[key] = log_den
        return self._log_den_memo[key]

    def _expect_ratio(self, slope, factor, rel_tol=1e-10):
        log_den = self._log_denominator(rel_tol)
        log_num, sign = self._integrate(
            self._log_weighted(slope), factor=factor, rel_tol=rel_tol
        )
        if sign == 0.0:
            return 0.0
        return sign * math.exp(log_num - log_den)

    def _mu_second_moment_factor(self, n):
        def factor(t):
            mean, var = self.mu_given_sigma(math.exp(min(2.0 * t, 700.0)))
            return float(mean[n] ** 2 + var[n])
        return factor

    def mu2_over_sigma2_quad(self, n, rel_tol=1e-10):
        """E[mu_n^2 / sigma2 | x] by quadrature."""
        return self._expect_ratio(-2.0, self._mu_second_moment_factor(n), rel_tol)

    def mu2_quad(self, n, rel_tol=1e-10):
        """E[mu_n^2 | x] by quadrature."""
        return self._expect_ratio(0.0, self._mu_second_moment_factor(n), rel_tol)

    # -- closed form ---------------------------------------------------------

    def _conjugate_or_raise(self):
        if self.conjugate is None:
            raise MethodUnavailable(
                "no conjugate sigma-marginal for GaussHierPrior without "
                "scale_by_sigma; use quadrature or importance"
            )
        c, a = self.conjugate
        if not a > 0:
            raise MomentDivergent("degenerate dataset: s2 = 0")
        return c, a

    def _closed_sigma_moment(self, p):
        """E[sigma^p | x] = A^(p/2) G((c-1-p)/2) / G((c-1)/2); needs p < c-1."""
        c, a = self._conjugate_or_raise()
        if c - 1.0 - p <= 0:
            raise MomentDivergent(
                f"E[sigma^{p:g}] diverges: exponent margin {c - 1 - p:g} <= 0"
            )
        return math.exp(
            0.5 * p * math.log(a)
            + special.gammaln(0.5 * (c - 1.0 - p))
            - special.gammaln(0.5 * (c - 1.0))
        )

    def expect_closed(self, phi, group=None):
        c, a = self._conjugate_or_raise()
        if phi == "inv_sigma2":
            return (c - 1.0) / (2.0 * a)
        if phi == "sigma2":
            return self._closed_sigma_moment(2.0)
        if phi == "sigma":
            return self._closed_sigma_moment(1.0)
        if phi == "log_sigma2":
            return math.log(a) - special.digamma(0.5 * (c - 1.0))
        if phi == "mu":
            return float(self._mu_star[group])
        if phi == "mu_over_sigma2":
            return float(self._mu_star[group]) * (c - 1.0) / (2.0 * a)
        raise ValueError(phi)

    def has_closed_form(self):
        return self.conjugate is not None

    # internal moments used by estimators/reference (closed path)
    def mu2_over_sigma2_closed(self, group):
        self._conjugate_or_raise()
        return (
            float(self._mu_star[group]) ** 2 * self.expect_closed("inv_sigma2")
            + float(self._vfac[group])
        )

    def sum_mu_var_closed(self):
        """Sum_n Var(mu_n | x); needs E[sigma2] finite."""
        self._conjugate_or_raise()
        return self.expect_closed("sigma2") * float(np.sum(self._vfac))

    # -- importance sampling ---------------------------------------------------

    def importance_sample(self, count, seed, ess_warn_frac=0.1):
        """Self-normalized sample of sigma2 with lazy exact-conditional mu draws."""
        if self.conjugate is not None:
            c_f, a_f = self.conjugate
        else:
            # fit inverse-gamma by matching mode and curvature in t = log sigma
            lw = self._log_weighted(0.0)
            res = optimize.minimize_scalar(
                lambda t: -lw(t),
                bounds=(self._t_hint - 30, self._t_hint + 30),
                method="bounded",
            )
            t_star = float(res.x)
            h = 1e-4
            curv = -(lw(t_star + h) - 2 * lw(t_star) + lw(t_star - h)) / (h * h)
            c_f = max(0.5 * curv + 1.0, 1.5)
            a_f = 0.5 * (c_f - 1.0) * math.exp(2.0 * t_star)
        rng = rng_from(seed, 0)
        shape = 0.5 * (c_f - 1.0)
        sigma2 = stats.invgamma.rvs(shape, scale=a_f, size=count, random_state=rng)
        log_target = self.log_sigma_density(np.sqrt(sigma2)) - 0.5 * np.log(4.0 * sigma2)
        log_prop = stats.invgamma.logpdf(sigma2, shape, scale=a_f)
        logw = log_target - log_prop
        logw -= special.logsumexp(logw)
        w = np.exp(logw)
        ess = 1.0 / float(np.sum(w * w))
        return ImportanceSample(
            posterior=self,
            sigma2=sigma2,
            weights=w,
            ess=ess,
            seed=seed,
            ess_warning=ess < ess_warn_frac * count,
        )

    # -- dispatch ---------------------------------------------------------------

    def expectation(self, req: FunctionalRequest) -> ExpectationResult:
        method = req.method
        if method == "auto":
            method = "closed_form" if self.has_closed_form() else "quadrature"
        if method == "closed_form":
            return ExpectationResult(self.expect_closed(req.phi, req.group), method)
        if method == "quadrature":
            value = self.expect_quadrature(req.phi, req.group, rel_tol=min(req.tolerance, 1e-10))
            return ExpectationResult(value, method)
        if method == "importance":
            sample = self.importance_sample(req.sample_count, req.seed)
            value, se = sample.expect(req.phi, req.group)
            return ExpectationResult(
                value, method, stderr=se,
                diagnostics={"ess": sample.ess, "ess_warning": sample.ess_warning},
            )
        raise ValueError(f"unknown method {req.method!r}")

    # -- tail mass ---------------------------------------------------------------

    def tail_log_fraction(self, alpha):
        """log of the sigma < alpha share of the E[1/sigma2 | x] numerator.

        Computed on nested integration ranges in t = log sigma; may be very
        negative (the plain fraction underflows to 0.0 harmlessly).
        """
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        lw = self._log_weighted(-2.0)
        log_full, _ = self._integrate(lw)
        t_cut = math.log(alpha)
        # the tail integrand peaks at its upper boundary; walk down for a window
        cut_val = lw(t_cut)
        t = t_cut
        step = 0.25
        for _ in range(400):
            t -= step
            if lw(t) < cut_val - _WINDOW_NATS:
                break
            step = min(step * 1.6, 64.0)
        grid = np.linspace(t, t_cut, 129)
        shift = float(np.max([lw(u) for u in grid]))
        val, _ = integrate.quad(lambda u: math.exp(lw(u) - shift), t, t_cut,
                                limit=200, epsabs=1e-290)
        if val == 0.0:
            return -math.inf
        return shift + math.log(val) - log_full


@dataclass
class ImportanceSample:
    """Weighted sigma2 sample; mu columns drawn on demand (memory: O(count))."""

    posterior: Posterior
    sigma2: np.ndarray
    weights: np.ndarray
    ess: float
    seed: int
    ess_warning: bool

    def mu_column(self, group):
        """mu_group draws from the exact Gaussian conditional given sigma."""
        rng = rng_from(self.seed, 1, group)
        if self.posterior.conjugate is not None:
            mean = float(self.posterior._mu_star[group])
            var = self.sigma2 * float(self.posterior._vfac[group])
        else:
            mean = np.empty(len(self.sigma2))
            var = np.empty(len(self.sigma2))
            for i, s2 in enumerate(self.sigma2):
                m, v = self.posterior.mu_given_sigma(s2)
                mean[i] = m[group]
                var[i] = v[group]
        return mean + np.sqrt(var) * rng.standard_normal(len(self.sigma2))

    def expect(self, phi, group=None):
        """(estimate, self-normalized MC standard error)."""
        if phi == "inv_sigma2":
            vals = 1.0 / self.sigma2
        elif phi == "sigma2":
            vals = self.sigma2
        elif phi == "sigma":
            vals = np.sqrt(self.sigma2)
        elif phi == "log_sigma2":
            vals = np.log(self.sigma2)
        elif phi == "mu":
            vals = self.mu_column(group)
        elif phi == "mu_over_sigma2":
            vals = self.mu_column(group) / self.sigma2
        else:
            raise ValueError(phi)
        est = float(np.sum(self.weights * vals))
        se = math.sqrt(float(np.sum((self.weights * (vals - est)) ** 2)))
        return est, se


def sigma_marginal(data: Dataset, prior):
    """The log sigma-marginal density function with mu integrated out."""
    post = Posterior(data, prior)
    return post.log_sigma_density


def expectation(data: Dataset, prior, req: FunctionalRequest) -> float:
    return Posterior(data, prior).expectation(req).value


def importance_sample(data: Dataset, prior, count, seed) -> ImportanceSample:
    return Posterior(data, prior).importance_sample(count, seed)
