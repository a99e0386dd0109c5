"""Exception taxonomy used across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericDomainError(ValueError):
    """Input values outside an operation's numeric domain (NaN/Inf)."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class InputError(ValueError):
    """User-supplied data is unusable (empty query, unknown id, ...)."""


class ConfigurationError(ValueError):
    """A configuration value is internally inconsistent."""


class ValidationError(ValueError):
    """A dataset or artifact failed integrity validation."""


class FormatError(ValueError):
    """A serialized artifact is malformed or mismatched."""
