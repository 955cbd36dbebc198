"""Exception types shared across the library."""


class DimensionMismatch(ValueError):
    """Raised when operand shapes cannot be combined.

    The message always names both shapes so callers can log it directly.
    """


class ConfigError(ValueError):
    """Raised when an experiment configuration is invalid; names the field."""


class DataFormatError(ValueError):
    """Base class for dataset parsing failures."""


class BadMagicError(DataFormatError):
    """File does not start with the expected IDX magic number."""


class TruncatedFileError(DataFormatError):
    """File ends before the payload announced by its header."""


class CountMismatchError(DataFormatError):
    """Image file and label file disagree on the number of examples."""
