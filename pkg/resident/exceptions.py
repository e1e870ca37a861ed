"""Error types raised by the resident library."""

from typing import Optional


class ResidentError(Exception):
    """Base class for all errors raised by resident."""


class ContractViolation(ResidentError, ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigurationError(ResidentError, ValueError):
    """A model, training or task configuration is invalid."""


class FormatError(ResidentError):
    """A model file could not be decoded."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ParseError(ResidentError, ValueError):
    """A TSV input file is malformed."""

    def __init__(self, message: str, path: Optional[str] = None, line_number: int = 0):
        self.path = path
        self.line_number = line_number
        where = f"{path}:{line_number}" if path else f"line {line_number}"
        super().__init__(f"{where}: {message}")
