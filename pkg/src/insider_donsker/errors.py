"""Exception types shared by the numerical modules and the CLI."""


class InsiderControlError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class HorizonViolation(InsiderControlError):
    pass


class DegenerateVariance(InsiderControlError):
    pass


class DensityFloor(InsiderControlError):
    pass


class QuadratureDivergence(InsiderControlError):
    pass


class InvalidDamping(InsiderControlError):
    pass


class GridMismatch(InsiderControlError):
    pass


class AdmissibilityViolation(InsiderControlError):
    def __init__(self, message, t=None, mark=None, path_index=None):
        super().__init__(message)
        self.t = t
        self.mark = mark
        self.path_index = path_index


class DegenerateVolatility(InsiderControlError):
    pass


class DegenerateMarket(InsiderControlError):
    pass


class NoRootInBracket(InsiderControlError):
    pass


class InvalidRegime(InsiderControlError):
    pass


class BracketFailure(InsiderControlError):
    pass


class ConfigError(InsiderControlError):
    exit_code = 2
