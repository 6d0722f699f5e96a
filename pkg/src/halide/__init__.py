"""Two-level imitation of demonstrators of uneven quality, weighted by ranked learning gains."""

__version__ = "0.1.0"


class HalideError(Exception):
    """Base class for library errors."""


class DataError(HalideError):
    """Malformed or inconsistent input data."""


class NumericalError(HalideError):
    """A numerical procedure produced non-finite values or failed outright."""
