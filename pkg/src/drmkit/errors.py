"""Exception hierarchy shared by every drmkit module."""


class DRMError(Exception):
    """Base class for all drmkit errors."""


class ValidationError(DRMError, ValueError):
    """A model, dataset or argument violates its invariants.

    ``violations`` holds one human-readable line per broken rule.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ShapeError(ValidationError):
    """Array shapes do not compose."""


class EnumerationTooLarge(DRMError):
    """Brute-force enumeration would exceed the configured cap."""


class NumericalError(DRMError, ArithmeticError):
    """A computation produced non-finite values (divergence, singularity)."""


class PersistenceError(DRMError):
    """Base class for file format errors."""


class CorruptFileError(PersistenceError):
    """The file is truncated, has a bad magic number or fails its checksum."""


class VersionMismatchError(PersistenceError):
    """The file was written by a format version this reader does not know."""


class SchemaError(PersistenceError):
    """The file parses but its contents do not match the expected schema."""
