"""Exception hierarchy shared by every module."""


class DisaggError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DisaggError, ValueError):
    """Invalid configuration value; the message names the offending field."""


class ShapeError(DisaggError, ValueError):
    pass


class DomainError(DisaggError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class LoadError(DisaggError):
    """A dataset entry could not be loaded; the message names the sample id."""


class ContractError(DisaggError, RuntimeError):
    pass


class NumericalError(DisaggError, ArithmeticError):
    """Training produced a non-finite loss."""
