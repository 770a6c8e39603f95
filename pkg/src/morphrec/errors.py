"""Exception types shared across the package."""


class MorphrecError(Exception):
    """Base class for all package-specific errors."""


class FormatError(MorphrecError):
    """A file does not match its declared binary or text format."""


class ValidationError(MorphrecError):
    """Data violates a documented invariant."""


class NumericError(MorphrecError):
    """A numeric computation produced non-finite or degenerate results."""
