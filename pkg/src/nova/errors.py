"""Exception types shared across the package."""


class NovaError(Exception):
    """Base class for all errors raised by this package."""


class InputError(NovaError, ValueError):
    """An argument violated an operation's precondition."""


class ConfigError(NovaError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class UsageError(NovaError, RuntimeError):
    """An operation was called out of order or outside its valid range."""


class InternalStateError(NovaError, RuntimeError):
    """Engine state became inconsistent (should never happen in a correct run)."""


class DegenerateEntropyError(NovaError, ArithmeticError):
    """Layer-linkage mean entropy was non-positive."""
