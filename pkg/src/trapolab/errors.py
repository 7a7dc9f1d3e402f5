"""Exception hierarchy shared by every trapolab module."""


class TrapoError(Exception):
    """Base class for all library errors."""


class DomainError(TrapoError, ValueError):
    """An argument lies outside the domain of the operation."""


class AlphabetMismatch(TrapoError, ValueError):
    pass


class SupportMismatch(TrapoError, ValueError):
    pass


class EmptyBatch(TrapoError, ValueError):
    pass


class EmptySet(TrapoError, ValueError):
    pass


class NonConvergence(TrapoError, RuntimeError):
    """Iterative solver stopped before reaching its tolerance.

    The last iterate and the final stationarity measure are attached so the
    caller can still inspect how far off it was.
    """

    def __init__(self, message, iterate=None, residual=None):
        super().__init__(message)
        self.iterate = iterate
        self.residual = residual


class DivergenceDetected(TrapoError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UnknownToken(TrapoError, KeyError):
    pass


class MissingAdvantages(TrapoError, ValueError):
    pass


class SpecInvalid(TrapoError, ValueError):
    pass


class ConfigError(TrapoError, ValueError):
    pass


class MissingMetrics(TrapoError, FileNotFoundError):
    pass
