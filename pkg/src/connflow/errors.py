"""Exception hierarchy shared by all connflow modules."""


class ConnflowError(Exception):
    """Base class for every error raised by connflow."""


class DimensionError(ConnflowError, ValueError):
    pass


class InputError(ConnflowError, ValueError):
    pass


class ConfigError(ConnflowError, ValueError):
    pass


class InsufficientDataError(ConnflowError, ValueError):
    pass


class StateError(ConnflowError, RuntimeError):
    pass


class TrainingError(ConnflowError, RuntimeError):
    """Raised when training diverges (non-finite loss)."""


class FormatError(ConnflowError, ValueError):
    """Malformed binary input; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(ConnflowError, ValueError):
    pass


class ChecksumError(FormatError):
    pass
