class ObjNoveltyError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ObjNoveltyError, ValueError):
    pass


class NumericalFailure(ObjNoveltyError, FloatingPointError):
    pass


class UnsupportedArchitecture(ObjNoveltyError, TypeError):
    pass


class SplitError(ObjNoveltyError, ValueError):
    pass


class UndefinedMetricError(ObjNoveltyError, ValueError):
    pass


class AggregationError(ObjNoveltyError, ValueError):
    pass


class StageError(ObjNoveltyError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class RangeError(ObjNoveltyError, ValueError):
    pass
