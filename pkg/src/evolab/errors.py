"""Exception and warning types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration; the message names every offending field."""


class MalformedResponseError(ValueError):
    """A response references actions outside the instance's action space."""


class UndefinedInputError(ValueError):
    """An operation was called on input for which it is undefined (e.g. empty)."""


class DomainError(ValueError):
    """A numeric argument is outside the operation's domain."""


class NumericError(RuntimeError):
    """A non-finite value appeared where finite arithmetic was required."""


class CorruptCheckpointError(RuntimeError):
    """Checkpoint bytes are truncated, tampered with, or of an unknown version."""


class SchemaMigrationError(RuntimeError):
    """A metrics log uses a schema version this build cannot read."""


class BalanceWarning(UserWarning):
    """A dataset balancing step had one class empty."""
