"""Exception types shared across the package."""


class ZcnasError(Exception):
    """Base class for all package errors."""


class ConfigError(ZcnasError):
    """Invalid configuration: bad space definition, malformed config file, ..."""


class DataError(ZcnasError):
    """Invalid data: unparsable table, duplicate ids, non-numeric cells, ..."""


class StructuralError(ZcnasError):
    """Network graph inconsistency, e.g. shape mismatch between layers."""


class StateError(ZcnasError):
    """Operation called out of order, e.g. backward before forward."""


class CorrelationUndefinedError(ZcnasError):
    """Correlation requested on a vector with zero rank variance."""
