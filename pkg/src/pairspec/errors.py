"""Exception taxonomy shared across the package.

Grouped so the CLI can map configuration problems and numeric failures
to distinct exit codes.
"""


class PairspecError(Exception):
    """Base class for all package errors."""


class ShapeError(PairspecError):
    """Matrix or vector dimensions do not match the operation."""


class SymmetryError(PairspecError):
    """Input required to be symmetric is not, beyond tolerance."""


class ConvergenceError(PairspecError):
    """Eigensolver failed to meet its residual bound."""


class NotPsdError(PairspecError):
    """Matrix required to be positive semidefinite has a negative eigenvalue."""


class CoverageError(PairspecError):
    """Task construction left a view with zero marginal probability."""


class GenerationError(PairspecError):
    """Procedural task generation produced a degenerate object."""


class UnreachableViewError(PairspecError):
    """A view with zero marginal probability was passed where support is required."""


class KernelDomainError(PairspecError):
    """A log-domain loss received a nonpositive kernel value."""


class SingularMatrixError(PairspecError):
    """A linear solve met a singular (or numerically singular) matrix."""


class TrainingError(PairspecError):
    """Training aborted, e.g. on a non-finite loss."""


class ConfigError(PairspecError):
    """Configuration violates the schema. Carries the offending field path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")
