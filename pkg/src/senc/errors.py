"""Exception types shared across the package."""


class SencError(Exception):
    """Base class for all package errors."""


class ShapeError(SencError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(SencError, ValueError):
    """A numeric operation was applied outside its domain (log of <= 0, NaN input, ...)."""


class ContractError(SencError, RuntimeError):
    """An API was used out of order or with an argument that breaks its contract."""


class ConfigError(SencError, ValueError):
    """Invalid or unknown configuration."""


class InputError(SencError, ValueError):
    """Caller-supplied data is unusable (empty mask, indivisible image dims, ...)."""


class IntegrityError(SencError, ValueError):
    """Internal data structures disagree with each other."""


class FormatError(SencError, ValueError):
    """A binary or text file does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(SencError, RuntimeError):
    """Optimisation diverged (non-finite loss)."""
