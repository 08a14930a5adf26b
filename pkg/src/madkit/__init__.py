"""Multi-domain adapters that fold into the filters of a frozen backbone."""

__version__ = "0.1.0"

from .adapters import ADAPTER_KINDS, fold, init_adapter  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    DimensionError,
    DomainLookupError,
    FormatError,
    MadkitError,
    NumericError,
)
from .model import BackboneSpec, MultiDomainModel  # noqa: E402
from .tensor import FilterBank, Tensor  # noqa: E402

__all__ = [
    "ADAPTER_KINDS",
    "BackboneSpec",
    "ConfigError",
    "DataError",
    "DimensionError",
    "DomainLookupError",
    "FilterBank",
    "FormatError",
    "MadkitError",
    "MultiDomainModel",
    "NumericError",
    "Tensor",
    "fold",
    "init_adapter",
]
