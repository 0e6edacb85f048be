"""Exception types shared across the package."""


class TofcError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(TofcError, ValueError):
    pass


class ConfigError(TofcError, ValueError):
    pass


class FormatError(TofcError):
    """Malformed file or stream. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    pass


class CRCError(FormatError):
    pass


class DecodeError(FormatError):
    pass


class NetworkError(TofcError):
    pass


class TrainingDivergence(TofcError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []
