"""Exception types shared across the package."""


class DomainMineError(Exception):
    """Base class for all package errors."""


class DimensionError(DomainMineError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(DomainMineError, ValueError):
    """Invalid or incomplete configuration."""


class ContractError(DomainMineError, RuntimeError):
    """A documented precondition was violated by the caller."""


class TrainingError(DomainMineError, RuntimeError):
    """Training aborted (e.g. a non-finite loss)."""


class DataError(DomainMineError, ValueError):
    """Malformed input data; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
