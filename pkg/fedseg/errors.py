"""Exception hierarchy shared by the simulator modules and the management commands."""
from typing import Optional


class FedSegError(Exception):
    """Base class for every failure raised by fedseg."""

    # exit code used by management commands when the error reaches the CLI
    exit_code = 1


class ConfigurationError(FedSegError):
    """Invalid shapes, layouts or configuration fields."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class UsageError(FedSegError):
    exit_code = 2


class NumericError(FedSegError):
    """NaN or Inf produced somewhere in a forward pass or a loss."""


class DegenerateBatchError(NumericError):
    pass


class DataError(FedSegError):
    pass


class GenerationError(FedSegError):
    pass


class DataFormatError(FedSegError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path} " if path else ""
        super().__init__(f"{where}at byte {offset}: {message}")


class ProtocolError(FedSegError):
    pass


class EncodingRangeError(FedSegError):
    pass


class VersionError(FedSegError):
    exit_code = 2
