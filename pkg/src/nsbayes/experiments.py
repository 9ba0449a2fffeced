"""Declarative experiment runner: consistency, prior sweeps, invariance,
small-variance tail mass. Produces a flat result table plus CSV/JSON/SVG.

All randomness flows from the spec's master seed through per-trial
substreams keyed by (grid index, replicate, flavor), so results do not
depend on execution order and the runner may execute cells concurrently.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
import csv
import json
import math
import time

import numpy as np

from . import __version__
from .errors import MomentDivergent, NsBayesError, RiskDivergent
from .estimators import (
    LossSpec,
    _minimize_1d,
    bayes_estimate_generic,
    corrected_baseline,
    log_posterior_density_sigma2,
    map_estimate,
    minekl_estimate,
    mle_estimate,
    postex_estimate,
    rkl_estimate,
)
from .model import Dataset, rng_from, simulate, suff_stats
from .posterior import Posterior
from .priors import prior_from_spec, prior_to_spec, sample_mu, validate_prior

CSV_COLUMNS = (
    "N", "replicate", "prior_label", "estimator",
    "sigma2_hat", "rel_error", "status", "runtime_ms",
)

EXPERIMENT_KINDS = ("consistency", "prior_sweep", "invariance", "tail_mass")


@dataclass(frozen=True)
class Reparameterization:
    """A bijection on the sigma2 coordinate."""

    name: str
    forward: callable
    inverse: callable
    dsigma2_deta: callable  # |d sigma2 / d eta| as a function of sigma2
    eta_positive: bool      # whether eta ranges over (0, inf)


REPARAMS = {
    "sqrt": Reparameterization(
        "sqrt", math.sqrt, lambda e: e * e,
        lambda s2: 2.0 * math.sqrt(s2), True,
    ),
    "log": Reparameterization(
        "log", math.log, math.exp, lambda s2: s2, False,
    ),
    "reciprocal": Reparameterization(
        "reciprocal", lambda s2: 1.0 / s2, lambda e: 1.0 / e,
        lambda s2: s2 * s2, True,
    ),
}


@dataclass
class ExperimentSpec:
    kind: str
    N_grid: list
    J: int
    true_sigma2: float
    priors: list          # prior spec dicts (see priors.prior_from_spec)
    estimators: list
    replicates: int
    master_seed: int
    mu_mode: object = "prior"   # "prior" | {"fixed": scalar-or-list} | {"normal": {...}}
    transforms: list = field(default_factory=lambda: ["sqrt", "log", "reciprocal"])
    alpha: float | None = None  # tail_mass only; default min(s, (2pi)^-1/2)/2
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if list(self.N_grid) != sorted(set(int(n) for n in self.N_grid)):
            raise ValueError("N_grid must be strictly increasing")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.J < 2:
            raise ValueError("J must be >= 2")
        if not self.true_sigma2 > 0:
            raise ValueError("true_sigma2 must be positive")

    def prior_objects(self):
        return [prior_from_spec(p) for p in self.priors]

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ResultRow:
    N: int
    replicate: int
    prior_label: str
    estimator: str
    sigma2_hat: float   # nan when status != ok
    rel_error: float    # nan when undefined
    status: str
    runtime_ms: int


@dataclass
class ResultTable:
    rows: list
    spec: ExperimentSpec
    meta: dict = field(default_factory=dict)

    def median_by(self, estimator, prior_label, n):
        vals = [
            r.sigma2_hat
            for r in self.rows
            if r.estimator == estimator and r.prior_label == prior_label
            and r.N == n and r.status == "ok"
        ]
        return float(np.median(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def _draw_mu(spec, prior, n, rng):
    mode = spec.mu_mode
    if mode == "prior":
        return sample_mu(prior, n, spec.true_sigma2, rng)
    if isinstance(mode, dict) and "fixed" in mode:
        return np.broadcast_to(np.atleast_1d(np.asarray(mode["fixed"], float)), (n,))
    if isinstance(mode, dict) and "normal" in mode:
        cfg = mode["normal"]
        return cfg.get("mean", 0.0) + cfg.get("sd", 1.0) * rng.standard_normal(n)
    raise ValueError(f"unknown mu_mode {mode!r}")


def _mu_depends_on_prior(spec):
    return spec.mu_mode == "prior"


def _dataset_for(spec, prior, prior_index, grid_index, n, replicate):
    flavor = prior_index if _mu_depends_on_prior(spec) else 0
    rng = rng_from(spec.master_seed, grid_index, replicate, flavor)
    mu = _draw_mu(spec, prior, n, rng)
    return simulate(n, spec.J, spec.true_sigma2, mu, rng=rng)


# ---------------------------------------------------------------------------
# estimator registry
# ---------------------------------------------------------------------------

def _run_named_estimator(name, data, prior):
    if name == "rkl":
        return rkl_estimate(data, prior)
    if name == "rkl_quadrature":
        return rkl_estimate(data, prior, method="quadrature")
    if name == "rkl_generic":
        return bayes_estimate_generic(data, prior, LossSpec("reverse_kl"))
    if name == "minekl":
        return minekl_estimate(data, prior)
    if name == "mle":
        return mle_estimate(data)
    if name == "map":
        return map_estimate(data, prior)
    if name == "postex":
        return postex_estimate(data, prior, "sigma2")
    if name == "postex_sigma":
        return postex_estimate(data, prior, "sigma")
    if name == "corrected":
        return corrected_baseline(data)
    raise ValueError(f"unknown estimator {name!r}")


def _timed_cell(fn, n, replicate, prior_label, estimator):
    t0 = time.perf_counter()
    status, s2_hat = "ok", math.nan
    try:
        s2_hat = fn()
    except MomentDivergent:
        status = "moment_divergent"
    except RiskDivergent:
        status = "risk_divergent"
    except NsBayesError:
        status = "error"
    ms = int(round(1000.0 * (time.perf_counter() - t0)))
    return status, s2_hat, ms


def _cell_row(spec, n, replicate, prior_label, estimator, fn, rel_to=None):
    status, s2_hat, ms = _timed_cell(fn, n, replicate, prior_label, estimator)
    rel = math.nan
    if status == "ok" and rel_to is not None:
        rel = abs(s2_hat - rel_to) / rel_to
    return ResultRow(n, replicate, prior_label, estimator,
                     s2_hat if status == "ok" else math.nan, rel, status, ms)


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

def _check_priors_valid(spec):
    for p in spec.prior_objects():
        for n in spec.N_grid:
            verdict = validate_prior(p, n, spec.J)
            if not verdict.valid:
                raise ValueError(f"prior {p.label} invalid at N={n}: {verdict.reason}")


def run_consistency(spec: ExperimentSpec, max_workers=None) -> ResultTable:
    """One row per (N, replicate, prior, estimator); never aborts on a cell."""
    _check_priors_valid(spec)
    priors = spec.prior_objects()

    def trial(args):
        gi, n, rep, pi, prior = args
        data = _dataset_for(spec, prior, pi, gi, n, rep)
        rows = []
        for est in spec.estimators:
            rows.append(_cell_row(
                spec, n, rep, prior.label, est,
                lambda est=est: _run_named_estimator(est, data, prior).sigma2_hat,
                rel_to=spec.true_sigma2,
            ))
        return rows

    tasks = [
        (gi, n, rep, pi, prior)
        for gi, n in enumerate(spec.N_grid)
        for rep in range(spec.replicates)
        for pi, prior in enumerate(priors)
    ]
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            chunks = list(pool.map(trial, tasks))
    else:
        chunks = [trial(t) for t in tasks]
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (r.N, r.replicate, r.prior_label, r.estimator))
    return ResultTable(rows, spec, meta=_summaries(rows, spec))


def _summaries(rows, spec):
    medians = {}
    for r in rows:
        key = (r.estimator, r.prior_label, r.N)
        medians.setdefault(key, []).append(r.sigma2_hat)
    def med(vals):
        finite = [v for v in vals if not math.isnan(v)]
        return float(np.median(finite)) if finite else math.nan

    return {
        "median_sigma2_hat": {
            f"{e}|{p}|N={n}": med(v) for (e, p, n), v in sorted(medians.items())
        }
    }


def rkl_estimate_transformed(data: Dataset, prior, reparam: Reparameterization):
    """Reverse-KL estimate computed in the eta = phi(sigma2) coordinate.

    The loss depends only on likelihoods, so the risk as a function of eta is
    the sigma2 risk composed with phi^{-1}; the minimization really runs over
    the transformed coordinate (this is what catches parameterization leaks).
    Returns eta_hat.
    """
    post = Posterior(data, prior)
    e_inv = post.expect_quadrature("inv_sigma2")
    e_log = post.expect_quadrature("log_sigma2")
    nj = post.N * post.J

    def risk_eta(eta):
        s2 = reparam.inverse(eta)
        return 0.5 * nj * (s2 * e_inv - 1.0 - math.log(s2) + e_log)

    eta0 = reparam.forward(1.0 / e_inv)
    if reparam.eta_positive:
        v_hat, _ = _minimize_1d(lambda v: risk_eta(math.exp(v)), math.log(eta0))
        return math.exp(v_hat)
    v_hat, _ = _minimize_1d(risk_eta, eta0)
    return v_hat


def map_estimate_transformed(data: Dataset, prior, reparam: Reparameterization):
    """MAP in the eta coordinate: Jacobian-adjusted density, numeric argmax."""
    post = Posterior(data, prior)

    def neg_logpost_eta(t):
        s2 = math.exp(t)
        mu = post.mu_given_sigma(s2)[0] if not post._is_power else post.stats.means
        return -(
            log_posterior_density_sigma2(data, prior, s2, mu)
            + math.log(reparam.dsigma2_deta(s2))
        )

    t_hat, _ = _minimize_1d(neg_logpost_eta, math.log(post.stats.s2))
    return reparam.forward(math.exp(t_hat))


def postex_transformed(data: Dataset, prior, reparam: Reparameterization):
    """E[phi(sigma2) | x] for the three supported transforms."""
    post = Posterior(data, prior)
    phi = {"sqrt": "sigma", "log": "log_sigma2", "reciprocal": "inv_sigma2"}[reparam.name]
    if post.has_closed_form():
        return post.expect_closed(phi)
    return post.expect_quadrature(phi)


def run_invariance(spec: ExperimentSpec) -> ResultTable:
    """Transform-commutation gaps for RKL (should vanish) and the MAP/PostEx
    non-invariance witnesses. rel_error holds the invariance gap
    |phi(base) - transformed| / |phi(base)|; sigma2_hat is the transformed
    estimate mapped back to the sigma2 coordinate."""
    _check_priors_valid(spec)
    priors = spec.prior_objects()
    rows = []
    for gi, n in enumerate(spec.N_grid):
        for rep in range(spec.replicates):
            for pi, prior in enumerate(priors):
                data = _dataset_for(spec, prior, pi, gi, n, rep)
                base = {}
                for est in ("rkl", "postex", "map"):
                    try:
                        base[est] = _run_named_estimator(est, data, prior).sigma2_hat
                    except NsBayesError:
                        base[est] = None
                for tname in spec.transforms:
                    rp = REPARAMS[tname]
                    for est, fn in (
                        ("rkl", rkl_estimate_transformed),
                        ("postex", postex_transformed),
                        ("map", map_estimate_transformed),
                    ):
                        label = f"{est}@{tname}"
                        if base[est] is None:
                            rows.append(ResultRow(n, rep, prior.label, label,
                                                  math.nan, math.nan,
                                                  "moment_divergent", 0))
                            continue
                        t0 = time.perf_counter()
                        try:
                            eta_hat = fn(data, prior, rp)
                            target = rp.forward(base[est])
                            gap = abs(target - eta_hat) / abs(target)
                            back = rp.inverse(eta_hat)
                            status = "ok"
                        except MomentDivergent:
                            back, gap, status = math.nan, math.nan, "moment_divergent"
                        except NsBayesError:
                            back, gap, status = math.nan, math.nan, "error"
                        ms = int(round(1000 * (time.perf_counter() - t0)))
                        rows.append(ResultRow(n, rep, prior.label, label,
                                              back, gap, status, ms))
    return ResultTable(rows, spec)


def run_prior_sweep(spec: ExperimentSpec) -> ResultTable:
    """Same dataset evaluated under every prior; meta reports the spread of
    each estimator's sigma2_hat across priors per (N, replicate)."""
    _check_priors_valid(spec)
    if _mu_depends_on_prior(spec):
        raise ValueError("prior_sweep needs a prior-independent mu_mode "
                         "(the dataset is shared across priors)")
    priors = spec.prior_objects()
    rows = []
    for gi, n in enumerate(spec.N_grid):
        for rep in range(spec.replicates):
            data = _dataset_for(spec, priors[0], 0, gi, n, rep)
            for prior in priors:
                for est in spec.estimators:
                    rows.append(_cell_row(
                        spec, n, rep, prior.label, est,
                        lambda est=est, p=prior: _run_named_estimator(est, data, p).sigma2_hat,
                        rel_to=spec.true_sigma2,
                    ))
    spread = {}
    for (est, n, rep), group in _group_by(rows, lambda r: (r.estimator, r.N, r.replicate)).items():
        vals = [r.sigma2_hat for r in group if r.status == "ok"]
        if len(vals) > 1:
            spread[f"{est}|N={n}|rep={rep}"] = float(max(vals) - min(vals))
    return ResultTable(rows, spec, meta={"spread_across_priors": spread})


def _group_by(rows, key):
    out = {}
    for r in rows:
        out.setdefault(key(r), []).append(r)
    return out


def run_tail_mass(spec: ExperimentSpec) -> ResultTable:
    """Normalized sigma < alpha share of the E[1/sigma2 | x] numerator.

    sigma2_hat holds the fraction (underflows to 0.0 when tiny); the log10
    fractions used for the monotone-decrease verdict are kept in meta.
    """
    _check_priors_valid(spec)
    priors = spec.prior_objects()
    rows = []
    log_fracs = {}  # (prior_label, replicate) -> [per-N log fraction]
    for gi, n in enumerate(spec.N_grid):
        for rep in range(spec.replicates):
            for pi, prior in enumerate(priors):
                data = _dataset_for(spec, prior, pi, gi, n, rep)
                s = math.sqrt(suff_stats(data).s2)
                alpha = spec.alpha
                if alpha is None:
                    alpha = 0.5 * min(s, (2.0 * math.pi) ** -0.5)
                if alpha > s:
                    raise ValueError(
                        f"alpha={alpha:g} exceeds s={s:g}: the small-sigma "
                        "tail bound only applies for alpha < s"
                    )
                t0 = time.perf_counter()
                lf = Posterior(data, prior).tail_log_fraction(alpha)
                ms = int(round(1000 * (time.perf_counter() - t0)))
                frac = math.exp(lf) if lf > -700 else 0.0
                rows.append(ResultRow(n, rep, prior.label, "tail_fraction",
                                      frac, math.nan, "ok", ms))
                log_fracs.setdefault((prior.label, rep), []).append(lf)
    decreasing = {
        f"{p}|rep={rep}": bool(all(b < a for a, b in zip(v, v[1:])))
        for (p, rep), v in sorted(log_fracs.items())
    }
    meta = {
        "log_fraction": {f"{p}|rep={rep}": v for (p, rep), v in sorted(log_fracs.items())},
        "monotone_decreasing": decreasing,
        "monotone_share": (
            sum(decreasing.values()) / len(decreasing) if decreasing else math.nan
        ),
    }
    return ResultTable(rows, spec, meta=meta)


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    runner = {
        "consistency": run_consistency,
        "prior_sweep": run_prior_sweep,
        "invariance": run_invariance,
        "tail_mass": run_tail_mass,
    }[spec.kind]
    return runner(spec)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def _fmt_float(x):
    if isinstance(x, float) and math.isnan(x):
        return ""
    return repr(float(x))


def emit(table: ResultTable, format, path):
    """Write the table as csv, json (manifest + rows), or svg_plot."""
    try:
        if format == "csv":
            _emit_csv(table, path)
        elif format == "json":
            _emit_json(table, path)
        elif format == "svg_plot":
            _emit_svg(table, path)
        else:
            raise ValueError(f"unknown output format {format!r}")
    except OSError as exc:
        raise OSError(f"writing {format} output to {path}: {exc}") from exc


def _emit_csv(table, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in table.rows:
            w.writerow([
                r.N, r.replicate, r.prior_label, r.estimator,
                _fmt_float(r.sigma2_hat), _fmt_float(r.rel_error),
                r.status, r.runtime_ms,
            ])


def read_result_csv(path):
    """Re-parse an emitted CSV into ResultRow values (exact round trip)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(ResultRow(
                N=int(rec["N"]),
                replicate=int(rec["replicate"]),
                prior_label=rec["prior_label"],
                estimator=rec["estimator"],
                sigma2_hat=float(rec["sigma2_hat"]) if rec["sigma2_hat"] else math.nan,
                rel_error=float(rec["rel_error"]) if rec["rel_error"] else math.nan,
                status=rec["status"],
                runtime_ms=int(rec["runtime_ms"]),
            ))
    return rows


def _emit_json(table, path):
    doc = {
        "schema": 1,
        "library_version": __version__,
        "master_seed": table.spec.master_seed,
        "spec": table.spec.to_dict(),
        "meta": table.meta,
        "rows": [asdict(r) for r in table.rows],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)


def _emit_svg(table, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    keys = sorted({(r.estimator, r.prior_label) for r in table.rows})
    ns = sorted({r.N for r in table.rows})
    for est, plabel in keys:
        med = [table.median_by(est, plabel, n) for n in ns]
        ax.plot(ns, med, marker="o", label=f"{est} | {plabel}")
    ax.axhline(table.spec.true_sigma2, color="k", lw=0.8, ls="--",
               label="true sigma2")
    ax.set_xscale("log")
    ax.set_xlabel("N (groups)")
    ax.set_ylabel("median sigma2_hat")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
