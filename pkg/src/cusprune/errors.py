"""Exception types shared across the toolkit.

ValidationError maps to CLI exit code 1; plain OSError (missing files,
unwritable paths) maps to exit code 2.
"""


class ValidationError(ValueError):
    """Input violates a documented contract (shapes, ranges, formats)."""


class FingerprintMismatch(ValidationError):
    """A plan or irrelevant set refers to a different weight snapshot."""


class CalibrationError(ValidationError):
    """The threshold search cannot reach the requested pruning ratio."""

    def __init__(self, message: str, closest_ratio: float, closest_tau: float):
        super().__init__(message)
        self.closest_ratio = closest_ratio
        self.closest_tau = closest_tau
