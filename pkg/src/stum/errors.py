"""Exception and warning types raised across the package."""


class StumError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(StumError, ValueError):
    pass


class AxisOutOfRange(StumError, IndexError):
    pass


class NonFiniteInput(StumError, ValueError):
    pass


class NotScalarLoss(StumError, ValueError):
    pass


class ParseError(StumError, ValueError):
    pass


class DimensionMismatch(StumError, ValueError):
    pass


class NonFiniteValue(StumError, ValueError):
    pass


class SeriesTooShort(StumError, ValueError):
    pass


class MissingGraph(StumError, ValueError):
    pass


class MissingGrad(StumError, RuntimeError):
    pass


class NonFiniteLoss(StumError, FloatingPointError):
    pass


class CheckpointMismatch(StumError, ValueError):
    pass


class EmptyObservationSet(StumError, ValueError):
    pass


class ConfigError(StumError, ValueError):
    pass


class DegenerateChannel(UserWarning):
    """A channel's training std is ~0; its std was clamped to 1."""
