"""Exception hierarchy shared across the package."""


class ManeuverPoolingError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(ManeuverPoolingError, ValueError):
    pass


class ShapeError(ManeuverPoolingError, ValueError):
    pass


class SchemaError(ManeuverPoolingError, ValueError):
    pass


class DataError(ManeuverPoolingError, ValueError):
    pass


class ConfigError(ManeuverPoolingError, ValueError):
    pass


class UsageError(ManeuverPoolingError, ValueError):
    pass


class InvalidParameterError(ManeuverPoolingError, ValueError):
    pass


class TrainingDiverged(ManeuverPoolingError, RuntimeError):
    """Raised when the training loss stops being finite.

    ``batch`` holds the sample ids of the offending mini-batch.
    """

    def __init__(self, message, step=None, batch=None):
        super().__init__(message)
        self.step = step
        self.batch = list(batch) if batch is not None else []
