"""Exception types shared across the package."""


class GazeAdaptError(Exception):
    """Base class for all errors raised by gazeadapt."""


class ConfigurationError(GazeAdaptError, ValueError):
    pass


class GazeDomainError(GazeAdaptError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class IngestionError(GazeAdaptError, ValueError):
    pass


class ShapeError(GazeAdaptError, ValueError):
    pass


class ArchitectureError(GazeAdaptError, ValueError):
    pass


class DegenerateVectorError(GazeAdaptError, ValueError):
    """A vector that must be normalized has (numerically) zero length."""


class CompositionError(GazeAdaptError, ValueError):
    pass


class EvaluationError(GazeAdaptError, ValueError):
    pass


class TrainingDivergedError(GazeAdaptError, RuntimeError):
    """Raised when a loss becomes non-finite. Carries the diagnostic checkpoint."""

    def __init__(self, message, checkpoint=None, path=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.path = path
