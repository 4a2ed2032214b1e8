"""Exception hierarchy shared across the package.

The split matters for the CLI, which maps DataError to exit code 3 and
NumericalError subclasses to exit code 4.
"""

from __future__ import annotations

import numpy as np


class ModregError(Exception):
    """Base class for all package-specific errors."""


class DataError(ModregError):
    """Malformed input: files, schemas, shapes, or availability patterns."""


class NumericalError(ModregError):
    """Base class for numerical failures (singularity, non-convergence)."""


class SingularMatrixError(NumericalError):
    """A symmetric solve failed even after the jitter policy.

    Carries the smallest pivot (eigenvalue) of the offending matrix so the
    CLI can surface it.
    """

    def __init__(self, message: str, smallest_pivot: float | None = None):
        if smallest_pivot is not None:
            message = f"{message} (smallest pivot {smallest_pivot:.3e})"
        super().__init__(message)
        self.smallest_pivot = smallest_pivot


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap.

    Attributes
    ----------
    last_iterate : np.ndarray or None
        Coefficients at the final sweep, for inspection or restarting.
    kkt_residual : float or None
        Max-norm KKT residual at the final sweep.
    """

    def __init__(
        self,
        message: str,
        last_iterate: np.ndarray | None = None,
        kkt_residual: float | None = None,
    ):
        if kkt_residual is not None:
            message = f"{message} (KKT residual {kkt_residual:.3e})"
        super().__init__(message)
        self.last_iterate = last_iterate
        self.kkt_residual = kkt_residual


class SeparationError(NumericalError):
    """Logistic fit is diverging (quasi-separation); advise regularization."""
