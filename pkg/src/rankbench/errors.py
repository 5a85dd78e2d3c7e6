"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RankbenchError(Exception):
    exit_code = 2


class UsageError(RankbenchError, ValueError):
    """Bad arguments or a violated call precondition."""

    exit_code = 1


class DataError(RankbenchError, ValueError):
    """Input data cannot support the requested computation."""

    exit_code = 2


class SchemaError(DataError):
    """Missing columns, duplicate ids, mismatched feature names."""


class ParseError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class NumericalError(RankbenchError, ArithmeticError):
    exit_code = 3
