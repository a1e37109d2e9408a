"""Exception types raised across the pipeline."""


class HybridLocError(Exception):
    """Base class for all errors raised by hybridloc."""


class InvalidArgumentError(HybridLocError, ValueError):
    pass


class DegenerateGeometryError(HybridLocError):
    """Input configuration does not determine a unique geometric solution."""


class AlignmentInfeasibleError(HybridLocError):
    pass


class EmptyReconstructionError(HybridLocError):
    pass


class NoPoseError(HybridLocError):
    pass


class NoDetectionError(HybridLocError):
    pass


class UndefinedAngleError(HybridLocError, ValueError):
    pass


class StageDependencyError(HybridLocError):
    """A pipeline stage is missing one of its upstream artifacts."""
