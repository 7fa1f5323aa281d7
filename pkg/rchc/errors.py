# rchc/errors.py

"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses when it reaches the top
level: 1 for config/contract problems, 2 for I/O, 3 for numeric or
clustering failures.
"""


class RCHCError(Exception):
    """Base class for all errors raised by the rchc package."""

    exit_code = 1
    hint = None

    def __init__(self, message, hint=None):
        super().__init__(message)
        if hint is not None:
            self.hint = hint


class ConfigError(RCHCError):
    """Invalid, missing or unknown configuration key."""

    def __init__(self, key, message, hint=None):
        self.key = key
        super().__init__(f"config key '{key}': {message}", hint=hint)


class ContractError(RCHCError):
    """A precondition of an operation was violated (shape, range, scalar loss)."""


class ParseError(RCHCError):
    """Malformed input file. `line` is 1-based when known."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


class ExportError(RCHCError):
    exit_code = 2


class NumericInputError(RCHCError):
    exit_code = 3


class ClusteringError(RCHCError):
    """Degenerate centroid set. `epoch` is filled in by the adaptation loop."""

    exit_code = 3

    def __init__(self, message, epoch=None, hint=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message, hint=hint)


class StatisticsError(RCHCError):
    exit_code = 3
