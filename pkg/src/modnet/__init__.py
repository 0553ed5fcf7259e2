"""Modular dependency structure learning from node variables and network data."""

from .model import (
    Dataset,
    ModelParameters,
    ModularStructure,
    PriorConfig,
    build_regression_matrix,
    check_identifiability,
    condition_means,
    context_coefficient,
    log_likelihood_network,
    log_likelihood_variables,
    log_posterior,
    log_prior,
    precision_from_W,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ModelParameters",
    "ModularStructure",
    "PriorConfig",
    "build_regression_matrix",
    "check_identifiability",
    "condition_means",
    "context_coefficient",
    "log_likelihood_network",
    "log_likelihood_variables",
    "log_posterior",
    "log_prior",
    "precision_from_W",
    "__version__",
]
