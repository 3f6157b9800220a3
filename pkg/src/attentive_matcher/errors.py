"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition on the call (not on shapes) was violated."""


class NumericError(ArithmeticError):
    """A non-finite value or an out-of-range probability was encountered."""


class IngestionError(OSError):
    """A dataset file or directory is missing or unreadable."""


class IntegrityError(ValueError):
    """Dataset contents do not satisfy the expected counts or structure."""


class ParseError(ValueError):
    """A line of a stroke or configuration file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path
