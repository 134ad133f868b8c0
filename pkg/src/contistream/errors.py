"""Exception hierarchy shared by every module."""


class ContistreamError(Exception):
    """Base class for all library errors."""


class ContractError(ContistreamError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class DomainError(ContractError):
    """An input lies outside the mathematical domain of the operation."""


class NumericError(ContistreamError, ArithmeticError):
    """Non-finite values were encountered."""


class FormatError(ContistreamError, ValueError):
    """A binary file does not match its documented layout."""


class ConfigError(ContistreamError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
