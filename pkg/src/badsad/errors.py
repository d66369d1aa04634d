"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class BadSADError(Exception):
    exit_code = 1


class ConfigurationError(BadSADError):
    exit_code = 2


class DimensionError(ConfigurationError):
    """Tensor shapes do not line up."""


class UsageError(BadSADError):
    """An API was called in a way its contract forbids."""

    exit_code = 2


class DataError(BadSADError):
    exit_code = 3


class FormatError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class CapacityError(DataError):
    """A pool holds fewer items than a subset requests."""


class NumericalError(BadSADError):
    exit_code = 4


class TrainingError(NumericalError):
    pass
