"""Typed failures shared across the package.

Estimators and integrators never substitute values when a quantity does not
exist; they raise one of these instead.
"""


class NsBayesError(Exception):
    pass


class MomentDivergent(NsBayesError):
    """The defining posterior integral is infinite."""


class RiskDivergent(NsBayesError):
    """The posterior risk is infinite for every candidate estimate."""


class MethodUnavailable(NsBayesError):
    """Closed form requested for an unsupported (prior, functional) pair."""


class OptimizerFailed(NsBayesError):
    """1-d minimization did not converge; diagnostics in args."""


class InvalidPrior(NsBayesError):
    """Prior fails the marginal-finiteness requirement for this (N, J)."""
