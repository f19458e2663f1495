"""Exception taxonomy shared across the package."""


class SSMLiftError(Exception):
    """Base class for all package errors."""


class DimensionError(SSMLiftError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(SSMLiftError, ValueError):
    """A numeric or enum parameter is outside its legal domain."""


class ConfigError(SSMLiftError, ValueError):
    """A model / training configuration is inconsistent."""


class StructureError(SSMLiftError, ValueError):
    """A skeleton definition is not a single connected tree."""


class ParseError(SSMLiftError, ValueError):
    """A dataset / config file could not be parsed."""


class ValidationError(SSMLiftError, ValueError):
    """Loaded data violates a documented invariant (non-finite, out of bounds)."""


class AlignmentError(SSMLiftError, ValueError):
    """An alignment problem is degenerate (rank-deficient, all-zero)."""


class DegenerateInputError(SSMLiftError, ValueError):
    """Input is too short / too small for the requested computation."""


class EvaluationError(SSMLiftError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class NumericalFailure(SSMLiftError, ArithmeticError):
    """Training or verification hit a non-finite value or a failed check."""
