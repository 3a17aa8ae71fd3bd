"""Exception hierarchy shared by all pipeline stages."""


class Nof1Error(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(Nof1Error, ValueError):
    """Invalid configuration, shapes, or architecture geometry."""

    exit_code = 1


class UsageError(Nof1Error, ValueError):
    """A function was called outside its documented preconditions."""

    exit_code = 1


class DataError(Nof1Error):
    """Missing, unreadable, or inconsistent trial data."""

    exit_code = 2


class FormatError(DataError):
    """An image file could not be decoded."""


class ValidationError(DataError):
    """Trial metadata contradicts the declared design."""


class NumericError(Nof1Error, ArithmeticError):
    """A computation produced NaN/Inf or an undefined statistic."""

    exit_code = 3
