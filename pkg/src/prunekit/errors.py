"""Exception types shared across the package.

Every error raised on a contract boundary derives from one of these so the
CLI can map failures onto stable exit codes (config -> 2, numerical -> 3,
data/IO -> 4).
"""


class PrunekitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PrunekitError, ValueError):
    """An operand has the wrong rank, size, or channel count."""


class NumericalError(PrunekitError, ArithmeticError):
    """A non-finite value was produced or consumed where finiteness is required."""


class ContractError(PrunekitError, RuntimeError):
    """An API was driven outside its documented state machine (e.g. a stale backup)."""


class ConfigError(PrunekitError, ValueError):
    """A run configuration failed validation."""


class DataError(PrunekitError, OSError):
    """A dataset file is missing, truncated, or malformed."""
