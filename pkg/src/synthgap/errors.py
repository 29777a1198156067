"""Exception hierarchy shared by every subsystem.

The CLI maps these onto its exit codes, so each class corresponds to one
failure category rather than to one call site.
"""


class SynthGapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SynthGapError, ValueError):
    """An argument, config value or data shape violated a precondition."""


class StorageError(SynthGapError, OSError):
    """Reading or writing the filesystem failed."""


class FormatError(SynthGapError):
    """A file exists but its contents do not match the expected layout."""


class NotFoundError(SynthGapError, FileNotFoundError):
    """A required artifact (dataset, checkpoint, run) is missing."""


class DivergenceError(SynthGapError, ArithmeticError):
    """Training or gradient computation produced a non-finite value."""


class DegenerateDesignError(ValidationError):
    """A regression design matrix is rank deficient (for example all x equal)."""
