"""Exception hierarchy shared by every madkit module."""


class MadkitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MadkitError, ValueError):
    pass


class NumericError(MadkitError, ArithmeticError):
    pass


class ConfigError(MadkitError, ValueError):
    pass


class DataError(MadkitError, ValueError):
    pass


class FormatError(MadkitError, ValueError):
    pass


class DomainLookupError(MadkitError, KeyError):
    def __str__(self):
        return Exception.__str__(self)
