"""Errors and warnings raised by the toolkit.

Every error derives from ``CscError`` so callers (the CLI in particular) can
map a failure to an exit code without catching unrelated exceptions.
"""


class CscError(Exception):
    """Base class for toolkit errors"""


class ConfigurationError(CscError):
    """Invalid run configuration or unusable input set-up"""


class DimensionError(CscError, ValueError):
    """Array shapes do not agree"""


class NonFiniteError(DimensionError):
    """NaN or Inf reached a numerical primitive"""


class NumericalError(CscError, ArithmeticError):
    """A factorization or step-size search failed"""


class ParseError(CscError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}, line {line}: {message}")


class DataValidationError(CscError):
    """Files on disk disagree with their manifest or archive"""


class MissingArtifactError(DataValidationError):
    def __init__(self, path, what: str = "artifact"):
        self.path = str(path)
        super().__init__(f"Missing {what}: {self.path}")


class ArchiveVersionError(DataValidationError):
    """Unsupported format_version"""


class UndefinedMetricError(CscError, ValueError):
    """Distance is undefined for the given vectors"""


class ConvergenceWarning(UserWarning):
    def __init__(self, message: str, violation: float, groups: tuple = ()):
        self.violation = violation
        self.groups = tuple(groups)
        super().__init__(message)


class ConfigurationWarning(UserWarning):
    """A configuration value lies outside its recommended range"""
