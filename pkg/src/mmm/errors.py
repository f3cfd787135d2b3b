"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 1 for bad arguments or
configuration, 2 for bad data or file contents.
"""


class MMMError(Exception):
    exit_code = 3


class ArgumentError(MMMError, ValueError):
    """A caller passed an argument outside its documented domain."""

    exit_code = 1


class ConfigError(ArgumentError):
    """A run configuration document is malformed or has unknown keys."""


class DataError(MMMError):
    exit_code = 2


class ValidationError(DataError, ValueError):
    """Data violates an invariant (NaN values, empty sequences, bad ids)."""


class FormatError(DataError):
    """A binary file does not match its declared layout.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CRCError(FormatError):
    pass


class VersionError(FormatError):
    pass


class RepairError(DataError):
    """Empty-cluster repair could not find a distinct point for a cluster."""

    def __init__(self, message, cluster=None, stage=None):
        super().__init__(message)
        self.cluster = cluster
        self.stage = stage


class DivergenceError(DataError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
