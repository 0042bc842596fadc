"""Exception types shared across the package."""


class TpcError(Exception):
    """Base class for all errors raised by tpcvit."""


class DimensionError(TpcError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TpcError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(TpcError, ValueError):
    """Invalid configuration value or unknown configuration key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class FormatError(TpcError, ValueError):
    """A binary file does not follow the expected layout."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class NumericalError(TpcError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records
