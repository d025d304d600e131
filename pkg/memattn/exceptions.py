"""Exceptions raised by memattn. Each one also subclasses the closest builtin exception type, so
callers that catch ``ValueError`` or ``IOError`` keep working.
"""

from typing import Optional


class MemattnError(Exception):
    """Base class for all memattn errors"""


class DimensionError(MemattnError, ValueError):
    """A tensor shape or vector length does not match what an operation requires"""


class ParameterError(MemattnError, ValueError):
    """A scalar parameter is outside its valid range"""


class NumericError(MemattnError, ArithmeticError):
    """An operation produced NaN or infinite values"""


class SchemaError(MemattnError, ValueError):
    """Entries or bank files disagree on geometry"""


class FormatError(MemattnError, ValueError):
    """A file has the wrong magic bytes or an unsupported version"""


class CorruptionError(MemattnError, IOError):
    """A file is truncated, or a payload failed its checksum"""

    def __init__(self, message: str, entry_id: Optional[int] = None):
        super().__init__(message)
        self.entry_id = entry_id


class RetrievalError(MemattnError, IOError):
    """A memory payload could not be loaded during a forward pass"""

    def __init__(self, message: str, entry_id: Optional[int] = None):
        super().__init__(message)
        self.entry_id = entry_id


class BankIncompatibleError(MemattnError, ValueError):
    """A bank's geometry differs from the block or encoder it is used with"""


class ConfigurationError(MemattnError, ValueError):
    """Invalid run configuration or build inputs"""


class BuildError(MemattnError, RuntimeError):
    """A bank build produced no entries"""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
