"""Deep structured mixtures of Gaussian process experts."""

from ._version import __version__
from .errors import NumericalError, StateError, UsageError
from .kernels import Hyperparameters
from .structure import DsmgpGraph, build, count_induced_trees, validate
from .inference import log_marginal, posterior_update, predict_batch, predict_moments
from .hyperopt import optimize

__all__ = [
    "__version__",
    "Hyperparameters",
    "DsmgpGraph",
    "build",
    "validate",
    "count_induced_trees",
    "posterior_update",
    "log_marginal",
    "predict_moments",
    "predict_batch",
    "optimize",
    "NumericalError",
    "StateError",
    "UsageError",
]
