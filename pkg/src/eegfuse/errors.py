"""Exception types shared across the package.

Each class corresponds to one failure category so callers (and the CLI
exit-code mapping) can react without string matching.
"""


class EegFuseError(Exception):
    """Base class for all package errors."""


class DimensionError(EegFuseError):
    """Array shapes are inconsistent with an operation's contract."""


class ParameterError(EegFuseError):
    """A numeric argument is outside its valid range."""


class ConfigError(EegFuseError):
    """A configuration object violates its invariants."""


class DataError(EegFuseError):
    """A dataset or index structure cannot support the requested operation."""


class FormatError(EegFuseError):
    """An on-disk artifact is malformed or has an unknown version."""


class NumericError(EegFuseError):
    """A computation produced non-finite values."""


class ContractError(EegFuseError):
    """An API was called in a state its contract forbids."""
