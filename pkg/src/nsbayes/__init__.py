"""Reverse-KL Bayes estimation for the grouped-Gaussian (shared variance,
growing number of group means) problem, with competitor estimators and an
experiment harness for consistency, prior-robustness, and invariance studies.
"""

__version__ = "0.1.0"

from .errors import (
    InvalidPrior,
    MethodUnavailable,
    MomentDivergent,
    NsBayesError,
    OptimizerFailed,
    RiskDivergent,
)
from .model import (
    Dataset,
    ParamPoint,
    SuffStats,
    load_dataset,
    log_likelihood,
    log_likelihood_suffstats,
    rng_from,
    save_dataset,
    simulate,
    suff_stats,
)
from .priors import (
    GaussHierPrior,
    PowerPrior,
    PriorValidity,
    log_prior_density,
    prior_from_spec,
    prior_to_spec,
    sample_mu,
    validate_prior,
)
from .posterior import (
    ExpectationResult,
    FunctionalRequest,
    ImportanceSample,
    Posterior,
    expectation,
    importance_sample,
    sigma_marginal,
)
from .divergences import kl_products, kl_single, tv_distance, tv_distance_mc
from .estimators import (
    Estimate,
    LossSpec,
    bayes_estimate_generic,
    corrected_baseline,
    map_estimate,
    minekl_estimate,
    mle_estimate,
    postex_estimate,
    rkl_estimate,
)
from .reference import (
    ReferenceDistribution,
    fit_reference,
    kl_to_reference,
    log_g_x,
    rkl_via_reference,
)
from .experiments import (
    REPARAMS,
    ExperimentSpec,
    Reparameterization,
    ResultRow,
    ResultTable,
    emit,
    read_result_csv,
    run_consistency,
    run_experiment,
    run_invariance,
    run_prior_sweep,
    run_tail_mass,
)
