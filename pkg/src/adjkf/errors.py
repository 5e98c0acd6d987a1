"""Exception types shared across the package."""


class AdjkfError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(AdjkfError):
    """Operands have incompatible shapes."""


class SingularMatrix(AdjkfError):
    """LU factorization hit a pivot below the singularity threshold."""


class NotPsd(AdjkfError):
    """Matrix expected to be positive semi-definite is not."""


class NotPd(AdjkfError):
    """Matrix expected to be positive definite is not."""


class NonFiniteLoss(AdjkfError):
    """A loss or objective evaluated to NaN/inf where finiteness is required."""


class MissingInput(AdjkfError):
    """A required input file or config entry is absent."""
