"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class FdmError(Exception):
    pass


class UsageError(FdmError):
    """Bad arguments or configuration."""


class ConfigError(UsageError):
    pass


class RangeError(FdmError, ValueError):
    """A value or token outside its declared range."""


class SpecMismatchError(FdmError):
    """Data does not validate against its declared modality spec."""


class DataError(FdmError):
    """Corrupt, truncated, or version-mismatched stored data."""


class NumericalError(FdmError):
    """Non-finite activations, gradients, or loss."""
