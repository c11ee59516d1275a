"""Exception hierarchy shared across the package.

Each class carries the CLI exit code the operator sees when it escapes a
command (0 success, 2 config/usage, 3 data, 4 auth, 5 protocol/timeout).
"""


class M2FedError(Exception):
    exit_code = 1


class ConfigError(M2FedError, ValueError):
    exit_code = 2


class DimensionError(M2FedError, ValueError):
    exit_code = 3


class StructureError(M2FedError, ValueError):
    """Parameter/gradient layouts disagree."""

    exit_code = 3


class CodecError(M2FedError, ValueError):
    exit_code = 3


class DataError(M2FedError, ValueError):
    exit_code = 3


class PartitionError(DataError):
    exit_code = 3


class AggregationError(M2FedError, ValueError):
    exit_code = 5


class ProtocolError(M2FedError):
    exit_code = 5


class AuthError(M2FedError):
    exit_code = 4


class FederationAborted(M2FedError):
    """A synchronous round could not complete; ``history`` holds the finished rounds."""

    exit_code = 5

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
