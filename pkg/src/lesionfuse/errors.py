"""Exception hierarchy shared by every lesionfuse module."""


class LesionFuseError(Exception):
    """Base class for all package errors."""


class ShapeError(LesionFuseError, ValueError):
    pass


class ContractError(LesionFuseError, ValueError):
    pass


class StateError(LesionFuseError, RuntimeError):
    pass


class NumericError(LesionFuseError, ArithmeticError):
    pass


class ConfigError(LesionFuseError, ValueError):
    pass


class FormatError(LesionFuseError, ValueError):
    """Unreadable or unsupported file content."""


class SchemaError(LesionFuseError, ValueError):
    pass


class ParseError(LesionFuseError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VersionError(LesionFuseError, ValueError):
    """Bad magic bytes or unsupported format version."""
