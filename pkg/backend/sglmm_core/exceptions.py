"""Error hierarchy shared by the core and the command-line front end.

Each top-level category carries the process exit code the CLI reports for it.
Plain argument and shape mistakes raise ``ValueError`` instead.
"""
from typing import Optional

import numpy as np


class SglmmError(Exception):
    """Base class for every error raised on purpose by this package."""
    exit_code = 1


class ConfigError(SglmmError, ValueError):
    """Invalid, unknown or missing configuration keys."""
    exit_code = 2


class DataError(SglmmError, ValueError):
    """Input data that violates a schema or a family's support."""
    exit_code = 3

    def __init__(self, message: str, row: Optional[int] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class CompatibilityError(DataError):
    """A fit artifact does not match the dataset it is applied to."""


class MetricError(DataError):
    """A metric is undefined for the supplied inputs."""


class NumericalError(SglmmError, RuntimeError):
    """A numerical routine failed to produce finite or stable output."""
    exit_code = 4


class CholeskyError(NumericalError):
    """Cholesky factorization failed even after jitter escalation."""


class OptimizationError(NumericalError):
    """Non-finite objective or gradient during optimization.

    Carries the iteration index and, when available, the offending
    parameter vector.
    """

    def __init__(self, message: str, iteration: Optional[int] = None, theta: Optional[np.ndarray] = None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration
        self.theta = theta


class SamplerError(NumericalError):
    """MCMC initialization failure or too many divergent trajectories."""
