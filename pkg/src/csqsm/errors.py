"""Exception taxonomy shared across the package.

The CLI maps each class to a distinct exit code; library code raises the
most specific class that applies.
"""


class CsqsmError(Exception):
    """Base class for all package errors."""


class FormatError(CsqsmError):
    """A file or byte stream does not match its declared on-disk format."""


class ValidationError(CsqsmError):
    """Inputs violate a documented precondition or invariant."""


class ConvergenceWarning(UserWarning):
    """Iterative solver stopped at its iteration budget before reaching tol."""
