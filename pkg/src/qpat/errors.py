"""Exception taxonomy shared across the toolkit.

Exit-code mapping for the command line lives in cli.py: configuration
problems exit 2, numerical failures exit 3, I/O failures exit 4.
"""


class QpatError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(QpatError):
    """Invalid, inconsistent, or unknown configuration input."""


class DomainError(QpatError):
    """Input outside the physical or numerical domain of an operation."""


class GridMismatchError(DomainError):
    """Arrays that must share a grid do not."""


class NumericalInstabilityError(QpatError):
    """A numerical scheme blew up (NaN/Inf mid-run)."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class NoConvergenceError(QpatError):
    """An iterative search failed its residual floor; carries the best candidate."""

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class FitError(QpatError):
    """A regression or calibration fit is degenerate."""


class AggregationError(QpatError):
    """A region aggregate has no valid pixels to aggregate."""
