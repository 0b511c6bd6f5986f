"""Exception types shared across the toolkit."""


class CscrError(Exception):
    """Base class for all toolkit errors."""


class DataError(CscrError):
    """Malformed, inconsistent, or out-of-contract input data."""


class ConfigError(CscrError):
    """Invalid parameter values or parameter combinations."""
