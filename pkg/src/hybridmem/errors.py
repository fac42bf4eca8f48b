"""Exception types raised across the package.

Validation failures derive from :class:`ValidationError` (CLI exit code 1),
numerical failures from :class:`NumericalError` (CLI exit code 2).
"""


class HybridMemError(Exception):
    """Root of every error raised by this package."""


class ValidationError(HybridMemError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class MaskedOutError(ValidationError):
    """A query row has no allowed key."""


class ConfigError(ValidationError):
    pass


class CacheError(ValidationError):
    """A streaming cache does not belong to the chunk being processed."""


class PoseError(ValidationError):
    """A rotation is not orthonormal, or a pose is otherwise malformed."""


class DegenerateError(ValidationError):
    """Input geometry does not determine the requested quantity."""


class StitchError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class AlignmentError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(HybridMemError, ArithmeticError):
    pass
