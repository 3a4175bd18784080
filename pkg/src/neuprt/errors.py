"""Exception hierarchy shared by every stage of the pipeline."""


class PRTError(Exception):
    """Base class for all errors raised by neuprt."""


class InputError(PRTError, ValueError):
    """A caller passed an argument outside an operation's domain."""


class DataError(PRTError):
    """Input data (a file, a sampled function, a dataset) is unusable."""


class FormatError(DataError):
    """A serialized file has the wrong magic, version, schema or length."""


class NumericError(PRTError, ArithmeticError):
    """A computation produced non-finite values."""


class DegenerateNormalError(InputError):
    """The distance-field gradient vanished at the query point."""


class ProjectionError(DataError):
    """Surface projection did not converge."""


class CodegenError(PRTError):
    """The model cannot be emitted as a shader."""


class RoutingError(InputError):
    """A query point falls outside the partition grid."""
