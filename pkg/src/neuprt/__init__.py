"""Neural precomputed radiance transfer: bake SH transfer, fit it with a small MLP, shade with it."""

from .errors import (CodegenError, DataError, DegenerateNormalError, FormatError, InputError,
                     NumericError, PRTError, ProjectionError, RoutingError)

__version__ = "0.1.0"

__all__ = ["CodegenError", "DataError", "DegenerateNormalError", "FormatError", "InputError",
           "NumericError", "PRTError", "ProjectionError", "RoutingError", "__version__"]
