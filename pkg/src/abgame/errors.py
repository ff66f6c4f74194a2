"""Exception hierarchy shared across the package."""


class ABGameError(Exception):
    """Base class for every error raised by abgame."""


class DimensionError(ABGameError, ValueError):
    pass


class ParameterError(ABGameError, ValueError):
    pass


class NonFiniteError(ABGameError, ValueError):
    pass


class DivergenceError(ABGameError, ArithmeticError):
    pass


class UnsupportedLossError(ABGameError, ValueError):
    pass


class DegenerateRegionError(ABGameError, ValueError):
    pass


class ConfigError(ABGameError, ValueError):
    pass


class DataError(ABGameError):
    """Malformed input data file."""


class IdxHeaderError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxDimensionError(DataError):
    pass
