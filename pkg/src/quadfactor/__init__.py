"""Bayesian quadratic regression on latent factors.

Estimates main effects and pairwise (and higher-order) interactions among
correlated predictors by modeling them through a low-dimensional factor
structure, with shrinkage priors on the loadings and exact handling of
missing values and below-detection-limit entries.
"""

from .distributions import (
    PositiveDefiniteError,
    RngStream,
    sample_dirichlet,
    sample_gamma,
    sample_gig,
    sample_inverse_gaussian,
    sample_mvn,
    sample_truncated_normal,
)
from .model import (
    FactorPosteriorMoments,
    InducedCoefficients,
    factor_posterior_moments,
    induced_coefficients,
    induced_higher_order,
    kl_bound_check,
    select_k,
    simulate_induced_prior,
)
from .sampler import (
    ChainOutput,
    Dataset,
    Hyperparams,
    ModelState,
    run_chain,
)
from .diagnostics import ess
from .simulation import (
    GroundTruth,
    ScenarioSpec,
    generate_scenario,
    metrics,
    posterior_to_point,
)

__all__ = [
    "PositiveDefiniteError",
    "RngStream",
    "sample_dirichlet",
    "sample_gamma",
    "sample_gig",
    "sample_inverse_gaussian",
    "sample_mvn",
    "sample_truncated_normal",
    "FactorPosteriorMoments",
    "InducedCoefficients",
    "factor_posterior_moments",
    "induced_coefficients",
    "induced_higher_order",
    "kl_bound_check",
    "select_k",
    "simulate_induced_prior",
    "ChainOutput",
    "Dataset",
    "Hyperparams",
    "ModelState",
    "run_chain",
    "ess",
    "GroundTruth",
    "ScenarioSpec",
    "generate_scenario",
    "metrics",
    "posterior_to_point",
]

__version__ = "0.1.0"
