"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called outside its stated contract."""


class DomainError(ValueError):
    """An input value lies outside the mathematical domain of the map."""


class IntegrationDiverged(RuntimeError):
    """A trajectory blew up; carries the time of failure."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class DataFormatError(ValueError):
    """A persisted artifact could not be parsed; carries a byte offset."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class IntegrityError(ValueError):
    """Persisted data and its metadata disagree."""


class ConfigError(ValueError):
    """A run configuration is invalid or unknown."""


class RunAborted(RuntimeError):
    """An inference run was stopped after persistent failures.

    Carries the partial run result when the loop got far enough to build one.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
