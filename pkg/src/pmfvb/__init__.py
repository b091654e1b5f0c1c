"""Particle mean-field variational Bayes: Langevin particle clouds for non-conjugate factors."""

__version__ = "0.1.0"

from .engine import (  # noqa: E402
    LmcConfig,
    ParticleCloud,
    RunTrace,
    StoppingRule,
    estimate_lower_bound,
    lmc_block_update,
    run_pmfvb,
)
from .errors import DomainError, InvalidArgument, NumericalFailure  # noqa: E402

__all__ = [
    "DomainError",
    "InvalidArgument",
    "LmcConfig",
    "NumericalFailure",
    "ParticleCloud",
    "RunTrace",
    "StoppingRule",
    "estimate_lower_bound",
    "lmc_block_update",
    "run_pmfvb",
]
