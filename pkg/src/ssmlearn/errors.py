"""Exception types shared across the package."""


class SsmLearnError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SsmLearnError):
    """A file does not conform to its expected container format."""


class VersionError(FormatError):
    """A file carries a format version this build cannot read."""


class CorruptionError(FormatError):
    """A file is structurally valid but its payload is damaged or truncated."""


class ValidationError(SsmLearnError):
    """Input content violates a semantic precondition (ordering, overlap, size)."""


class ShapeError(ValidationError):
    """Array arguments disagree on shape or dimensionality."""


class DomainError(SsmLearnError):
    """A numeric input lies outside the domain an operation is defined on."""


class UndefinedAucError(DomainError):
    """AUC is undefined because only one class is present among scored pairs."""


class NumericalError(SsmLearnError):
    """A computation produced non-finite values or failed a numeric guard."""
