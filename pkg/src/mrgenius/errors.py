"""Exception and warning types shared across the package."""


class MRGeniusError(Exception):
    """Base class for package errors."""


class DataValidationError(MRGeniusError, ValueError):
    """Input data failed validation.

    ``errors`` holds ``(row, message)`` pairs; ``row`` is the 1-based data row
    (header excluded) or ``None`` for file-level problems.
    """

    def __init__(self, message, errors=None):
        self.errors = list(errors or [])
        if self.errors:
            shown = "; ".join(
                f"row {r}: {m}" if r is not None else m for r, m in self.errors[:5]
            )
            more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class IdentificationError(MRGeniusError):
    """The target parameter is not identified from the data at hand."""


class ConvergenceError(MRGeniusError):
    """An iterative fit or root search did not converge."""

    def __init__(self, message, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)


class WeakIdentificationWarning(UserWarning):
    """Identification holds in sample but is statistically weak."""
