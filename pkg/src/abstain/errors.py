"""Exception types raised across the package."""


class AbstainError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 3


class DegenerateNorm(AbstainError):
    pass


class NonPositiveTemperature(AbstainError, ValueError):
    exit_code = 2


class EmptyMask(AbstainError, ValueError):
    pass


class ShapeMismatch(AbstainError, ValueError):
    pass


class FormatError(AbstainError):
    pass


class NormError(AbstainError):
    pass


class DuplicateId(AbstainError):
    pass


class InfeasibleGeometry(AbstainError):
    exit_code = 2


class EmptySplit(AbstainError):
    pass


class MissingHardNegative(AbstainError):
    pass


class EmptyOODPool(AbstainError):
    pass


class NonFiniteGradient(AbstainError):
    exit_code = 4


class DivergedLoss(AbstainError):
    exit_code = 4


class SingleClass(AbstainError, ValueError):
    pass


class IndexTooSmall(AbstainError):
    pass


class DimensionMismatch(AbstainError, ValueError):
    pass


class ConfigError(AbstainError):
    exit_code = 2


class ConfigHashMismatch(AbstainError):
    pass


class ConfigHashWarning(UserWarning):
    pass
