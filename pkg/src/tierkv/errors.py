"""Exception hierarchy shared by all tierkv modules."""


class TierKVError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(TierKVError, ValueError):
    """A hyperparameter or argument is out of its valid range."""


class DataError(TierKVError, ValueError):
    """Input data is malformed (non-finite, duplicated, wrongly shaped)."""


class ChunkNotFoundError(TierKVError, KeyError):
    """A chunk id was requested that the store never received."""

    def __init__(self, chunk_id):
        self.chunk_id = chunk_id
        super().__init__(f"unknown chunk id {chunk_id}")

    def __str__(self):
        return self.args[0]


class StateError(TierKVError, RuntimeError):
    """An operation was attempted on state that cannot support it."""


class FormatError(TierKVError, ValueError):
    """A tensor file is corrupt or has an unsupported header."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")
