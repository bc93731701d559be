"""Exception types raised across the package."""


class TNetError(Exception):
    """Base class for all package errors."""


class ShapeError(TNetError, ValueError):
    pass


class NumericDomainError(TNetError, ArithmeticError):
    pass


class ContractError(TNetError, RuntimeError):
    """A documented precondition of an operation was violated."""


class GeometryError(TNetError, ValueError):
    pass


class ConfigurationError(TNetError, ValueError):
    pass


class FormatError(TNetError, ValueError):
    """Malformed or corrupt binary file; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
