"""Exception hierarchy shared by every module.

Each class carries the process exit code used by the command line front end.
"""


class EitError(Exception):
    exit_code = 1


class ConfigError(EitError):
    exit_code = 2


class FormatError(ConfigError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeometryError(ConfigError):
    pass


class TopologyError(ConfigError):
    pass


class LayoutError(ConfigError):
    pass


class PatternError(ConfigError):
    pass


class NumericError(EitError):
    exit_code = 3


class CompatibilityError(NumericError):
    """Right-hand side violates a solvability condition (e.g. unbalanced current)."""


class DegenerateError(NumericError):
    pass


class IncompatibilityError(EitError):
    """Two artifacts (data matrices, layouts) that must match do not."""

    exit_code = 4


class QuadratureWarning(UserWarning):
    pass
