"""Online joint Bayesian state and parameter estimation.

Library plus CLI for twin experiments on discrete-time stochastic systems:
a factorized online variational estimator (method id ``fbovi``), joint
particle/unscented/ensemble-Kalman baselines, a computable posterior-gap
bound for linear systems, and a delayed-rejection adaptive-Metropolis
oracle.
"""

from assim.errors import (
    AssimError,
    ConfigError,
    DegenerateEnsembleError,
    FactorizationError,
    ModelBlowupError,
    StuckChainError,
    TargetDropError,
)
from assim.gaussians import Gaussian, gaussian_kl, gaussian_logpdf, sample_gaussian
from assim.grids import DensityGrid, hellinger_distance_grid, tv_distance_grid
from assim.rng import SeededRng

__version__ = "0.1.0"

__all__ = [
    "AssimError",
    "ConfigError",
    "DegenerateEnsembleError",
    "DensityGrid",
    "FactorizationError",
    "Gaussian",
    "ModelBlowupError",
    "SeededRng",
    "StuckChainError",
    "TargetDropError",
    "gaussian_kl",
    "gaussian_logpdf",
    "hellinger_distance_grid",
    "sample_gaussian",
    "tv_distance_grid",
    "__version__",
]
