"""Exception types shared across the package."""


class GazeFieldError(Exception):
    """Base class for all package errors."""


class InvalidArgument(GazeFieldError, ValueError):
    pass


class GeometryError(GazeFieldError):
    """Degenerate or physically impossible scene/camera configuration."""


class NotEstimable(GazeFieldError):
    """The gaze oracle could not find enough iris evidence."""


class UndefinedSimilarity(GazeFieldError):
    pass


class TrainingFailure(GazeFieldError):
    """An estimator did not reach its validation gate within the budget."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NumericFailure(GazeFieldError):
    """Non-finite loss during optimization."""


class ConfigError(GazeFieldError):
    pass


class CheckpointError(GazeFieldError):
    pass
