"""Exception types shared across the package."""


class LrcError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LrcError):
    """Invalid configuration value or inconsistent array shapes."""


class NumericError(LrcError):
    """A computation produced a non-finite value.

    ``where`` identifies the offending location (flat index, step index or
    block index depending on the caller).
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class ParseError(LrcError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(LrcError):
    """Structurally valid input with inconsistent content."""


class UsageError(LrcError):
    """API misuse, e.g. a backward pass fed a cache from different parameters."""
