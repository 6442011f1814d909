"""Exception hierarchy shared by every granet module."""


class GraNetError(Exception):
    """Base class for all errors raised by granet."""


class ContractError(GraNetError, ValueError):
    """An operation was called with arguments that violate its contract."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(GraNetError, FloatingPointError):
    """Non-finite values reached an operation that requires finite input."""


class ConfigError(GraNetError, ValueError):
    """A configuration value or flag combination is invalid."""


class ParseError(GraNetError, OSError):
    """An input file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
