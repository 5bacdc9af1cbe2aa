"""Exception hierarchy shared across the package."""


class HmocgpError(Exception):
    """Base class for all package errors."""


class InputShapeError(HmocgpError, ValueError):
    """Array arguments have incompatible shapes."""


class NumericalDegeneracyError(HmocgpError, ArithmeticError):
    """A covariance matrix could not be factorized even after adding jitter."""


class NonFiniteGradientError(HmocgpError, ArithmeticError):
    """A gradient (or adjoint) contains NaN or infinite entries."""


class NonFiniteElboError(HmocgpError, ArithmeticError):
    """The evidence lower bound evaluated to NaN or infinity."""


class TrainingDivergenceError(HmocgpError, RuntimeError):
    """Too many consecutive optimisation steps produced non-finite values."""


class LikelihoodDomainError(HmocgpError, ValueError):
    """A likelihood was evaluated outside its support or parameter domain."""


class UndefinedMetricError(HmocgpError, ValueError):
    """A metric is undefined for the given inputs (e.g. constant targets)."""


class ConfigurationError(HmocgpError, ValueError):
    """Invalid configuration value."""


class DataError(HmocgpError, ValueError):
    """Input data violate a required invariant.

    ``row`` is the 1-based data row when known.
    """

    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class CsvParseError(DataError):
    """A CSV file could not be parsed."""


class SchemaError(DataError):
    """A CSV file does not have the expected columns."""


class CensoringInvariantError(DataError):
    """A row is flagged censored but its value differs from its threshold."""
