"""Exception hierarchy. Exit codes are used by the command-line entry point."""


class FeccmError(Exception):
    exit_code = 1


class ConfigError(FeccmError, ValueError):
    exit_code = 2


class DataError(FeccmError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class SchemaError(DataError):
    pass


class DegenerateSplitError(DataError):
    pass


class EmptyFitError(DataError):
    pass


class EmptyEvalError(DataError):
    pass


class ContractError(FeccmError, ValueError):
    """Caller violated a documented precondition (dimension mismatch, missing input)."""

    exit_code = 3


class CapabilityError(FeccmError, TypeError):
    """A classifier lacks an operation the requested mode needs."""

    exit_code = 2


class NumericError(FeccmError, ArithmeticError):
    exit_code = 4


class UnknownTaskError(FeccmError, KeyError):
    exit_code = 3

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown task"
