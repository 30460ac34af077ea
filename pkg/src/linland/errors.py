"""Exception hierarchy.

Every failure mode surfaces as a named exception; numerical routines never
return silent garbage.
"""


class LinlandError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(LinlandError, ValueError):
    """Operands have incompatible shapes."""


class DataValidationError(LinlandError, ValueError):
    """Input data violates a constructor invariant (NaN/Inf, rank, sample count)."""


class DecompositionError(LinlandError, RuntimeError):
    """A dense factorization failed to converge."""


class GapViolationError(LinlandError, ValueError):
    """The singular-value gap rho is non-positive, so the subspace bound does not apply."""


class PreconditionError(LinlandError, ValueError):
    """A documented operation precondition does not hold for the given inputs."""


class NotLayerwiseMinimumError(PreconditionError):
    """The selected layer does not satisfy its normal equation."""


class NotLocalMinimumError(PreconditionError):
    """The weight stack is not a numerical local minimum."""


class ConstructionError(LinlandError, RuntimeError):
    """A constructive repair could not be completed (rank completion or step underflow)."""


class SizeLimitError(LinlandError, ValueError):
    """The request exceeds the dense desk-scale size limit."""


class DivergenceError(LinlandError, RuntimeError):
    """Gradient descent diverged; the step policy is misconfigured."""


class CertificationError(LinlandError, RuntimeError):
    """Sampled certification found a decrease; the input was not a minimum or tolerances are loose."""


class GenerationError(LinlandError, RuntimeError):
    """Random instance generation exhausted its retry budget."""
