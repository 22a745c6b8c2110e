"""Exception types shared across the package."""


class SparseDenseError(Exception):
    """Base class for all package errors."""


class FormatError(SparseDenseError):
    """A binary or text artifact does not match its documented layout."""


class TruncationError(FormatError):
    """A binary artifact ends before its declared payload is complete."""


class DuplicateError(SparseDenseError):
    """An identifier that must be unique appeared more than once."""


class MissingIdError(SparseDenseError):
    """A referenced identifier does not exist in the relevant table."""


class ShapeError(SparseDenseError):
    """Operands have incompatible dimensions."""


class NumericError(SparseDenseError):
    """A computation produced a non-finite value."""


class EmptyBatchError(SparseDenseError):
    """A batch operation received no items."""


class ConfigError(SparseDenseError):
    """A configuration value violates its contract."""
