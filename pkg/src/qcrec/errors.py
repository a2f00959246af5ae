class QcrecError(Exception):
    """Base class for package errors."""


class DataError(QcrecError, ValueError):
    """Invalid or unusable input data."""


class NumericalError(QcrecError, FloatingPointError):
    """Non-finite values or divergence during compute."""
