"""Exception hierarchy shared across the package."""


class ClockworkError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ClockworkError, ValueError):
    """Invalid shapes, configs or specs."""


class NumericError(ClockworkError, ArithmeticError):
    """A primitive produced NaN/Inf, or an update was rejected as non-finite."""


class OrderingError(ClockworkError, ValueError):
    """Timesteps or log-SNR values out of the required order."""


class ProtocolError(ClockworkError, RuntimeError):
    """Clock protocol violated, e.g. adaptor invoked with an empty cache."""


class InvalidCheckError(ClockworkError, RuntimeError):
    """A gradient check could not be performed (non-deterministic function)."""


class StatisticalValidityError(ClockworkError, ValueError):
    """Too few samples for a statistic to be meaningful."""


class ArchiveError(ClockworkError, IOError):
    """Malformed, truncated or incompatible tensor archive."""
