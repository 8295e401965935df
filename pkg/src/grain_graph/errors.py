"""Exception hierarchy shared by the pipeline stages.

The CLI maps these onto exit codes: validation problems exit 1, I/O
problems exit 2 and numeric failures exit 3.
"""


class GrainGraphError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(GrainGraphError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """Malformed file: missing columns, bad header, unknown schema version."""


class GeometryError(ValidationError):
    """Scan points do not form a complete rectangular grid with uniform step."""


class DanglingReferenceError(ValidationError):
    """A record references an id that does not exist."""


class ShapeError(ValidationError):
    """Operand shapes are incompatible."""


class UsageError(GrainGraphError):
    """API called in a way its contract forbids."""


class NumericError(GrainGraphError, ArithmeticError):
    """A computation produced NaN or Inf."""
