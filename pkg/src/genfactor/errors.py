"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError -> 2, DataError -> 3, NumericalError -> 4.
"""


class GenfactorError(Exception):
    """Base class for all package errors."""


class ParameterError(GenfactorError, ValueError):
    """A distribution or function parameter is outside its domain."""


class ConfigError(GenfactorError, ValueError):
    """Invalid run configuration (flags, config file, chain settings)."""


class DataError(GenfactorError, ValueError):
    """Malformed or inconsistent input data."""


class InsufficientDataError(DataError):
    """Not enough samples to carry out the requested computation."""


class PedigreeError(DataError):
    """Structural problem in a pedigree (cycles, unknown references)."""


class NumericalError(GenfactorError, RuntimeError):
    """A numerical operation failed (non-PSD matrix, non-finite update)."""
