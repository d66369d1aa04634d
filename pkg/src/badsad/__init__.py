"""Clean-label backdoor attacks on semi-supervised hypersphere anomaly detection."""

from .errors import (
    BadSADError,
    CapacityError,
    ConfigurationError,
    ConsistencyError,
    DataError,
    DimensionError,
    FormatError,
    NumericalError,
    TrainingError,
    UsageError,
)

__version__ = "0.1.0"
