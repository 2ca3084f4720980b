"""Exception hierarchy shared across the kit."""


class DDPNetError(Exception):
    """Base class for every error raised by the kit."""


class ShapeError(DDPNetError, ValueError):
    pass


class ConfigError(DDPNetError, ValueError):
    pass


class UsageError(DDPNetError, RuntimeError):
    pass


class DataError(DDPNetError, ValueError):
    pass


class CodecError(DataError):
    """Malformed or truncated image file; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DDPNetError, ValueError):
    pass
