"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, CheckFailure -> 4. Everything else is a bug.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value (or combination) violates a precondition."""


class DataError(ValueError):
    """Input data is unreadable, malformed, or out of range."""


class InvalidMaskError(ValueError):
    """An attention mask leaves some query row with no allowed key."""


class UsageError(RuntimeError):
    """An API was called out of protocol (e.g. reusing a consumed tape)."""


class CheckFailure(RuntimeError):
    """A self-check (gradient check) exceeded its tolerance."""
