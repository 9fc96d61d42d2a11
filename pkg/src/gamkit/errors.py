"""Exception types raised across gamkit."""


class GamkitError(Exception):
    """Base class for all gamkit errors."""


class UnsupportedModel(GamkitError):
    pass


class InputShapeError(GamkitError, ValueError):
    pass


class ShapeError(GamkitError, ValueError):
    pass


class UnknownLayer(GamkitError, KeyError):
    pass


class NonFiniteScore(GamkitError, FloatingPointError):
    pass


class DegenerateEmbedding(GamkitError, ValueError):
    pass


class EmptyInput(GamkitError, ValueError):
    pass


class InvalidRecord(GamkitError, ValueError):
    pass


class TrainingBudgetExceeded(GamkitError, RuntimeError):
    pass


class UnknownClass(GamkitError, KeyError):
    pass


class ConfigError(GamkitError, ValueError):
    pass
