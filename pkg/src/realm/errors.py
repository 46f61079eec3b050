"""Exception hierarchy shared across the package."""


class RealmError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RealmError, ValueError):
    """An argument violates an operation's precondition."""


class BackendError(RealmError):
    """An embedding backend failed; the original exception is chained."""


class ConfigurationError(RealmError):
    """Bad or incomplete configuration (missing weights, unknown names, ...)."""


class SchemaError(RealmError, ValueError):
    """A manifest or record does not match the expected schema."""

    def __init__(self, message, line=None, record_id=None):
        self.line = line
        self.record_id = record_id
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class TrainingAborted(RealmError):
    """Training stopped early; ``history`` holds the epochs completed so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
