"""Exception types shared across the package."""


class FedKdError(Exception):
    """Base class for all package errors."""


class DimensionError(FedKdError):
    """Array shapes do not satisfy an operation's contract."""


class RangeError(FedKdError):
    """A scalar argument is outside its permitted range."""


class ConfigurationError(FedKdError):
    """A run or experiment configuration is invalid."""


class FormatError(FedKdError):
    """An input file could not be parsed."""


class ValidationError(FedKdError):
    """Parsed data violates a schema or value constraint."""


class EvaluationError(FedKdError):
    """A metric is undefined for the given data."""
