"""csqsm: compressed-sensing complex MRI reconstruction and desk-scale QSM."""

__version__ = "0.1.0"

from .errors import ConvergenceWarning, CsqsmError, FormatError, ValidationError

__all__ = [
    "__version__",
    "CsqsmError",
    "FormatError",
    "ValidationError",
    "ConvergenceWarning",
]
