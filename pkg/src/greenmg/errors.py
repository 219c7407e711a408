"""Exception hierarchy.

Every error raised on purpose by the package derives from ``GreenMGError``.
The CLI maps error families (usage, architecture, numerical; I/O errors are
plain ``OSError``) onto distinct exit codes, so each concrete class declares
which family it belongs to.
"""


class GreenMGError(Exception):
    """Base class for all package errors."""

    family = "usage"


class NonDyadicGrid(GreenMGError, ValueError):
    """Grid size is not 2**L + 1, or has fewer than k coarsening levels."""


class UnsupportedDimension(GreenMGError, ValueError):
    """Spatial dimension other than 1 or 2."""


class LevelMismatch(GreenMGError, ValueError):
    """A transfer operator was asked to move past the ends of a hierarchy."""


class ShapeMismatch(GreenMGError, ValueError):
    """Array shapes do not conform to the plan or grid."""


class InvalidConfig(GreenMGError, ValueError):
    """Unknown problem or variant name, or an out-of-range setting."""


class InvalidCount(GreenMGError, ValueError):
    """A sample count or repetition count is not positive."""


class ArchitectureMismatch(GreenMGError, ValueError):
    """Checkpoint architecture is incompatible with the requested use."""

    family = "architecture"


class SingularInput(GreenMGError, ValueError):
    """A kernel was evaluated exactly on its singularity."""


class DegenerateTarget(GreenMGError, ValueError):
    """A target field has (near) zero norm, so a relative error is undefined."""

    family = "numerical"


class NumericalBlowup(GreenMGError, FloatingPointError):
    """Non-finite values appeared during evaluation or training."""

    family = "numerical"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CovarianceNotPD(GreenMGError, ArithmeticError):
    """Cholesky factorization of a jittered covariance failed."""

    family = "numerical"


class SolveFailure(GreenMGError, ArithmeticError):
    """A linear solve did not reach its residual target."""

    family = "numerical"
