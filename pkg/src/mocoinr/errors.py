"""Exception types shared across the package."""


class DataValidationError(ValueError):
    """Input data violates a documented invariant (non-finite values, bad ranges)."""


class ShapeError(ValueError):
    """Array shapes passed to an operator are incompatible."""


class ChecksumError(ValueError):
    """A container file failed its integrity check."""


class FormatVersionError(ValueError):
    """A container file has an unknown magic or version."""


class DivergenceError(RuntimeError):
    """Training loss blew up; carries the report collected so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
