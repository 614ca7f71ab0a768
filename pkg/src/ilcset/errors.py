"""Exception hierarchy and CLI exit codes."""


class IlcsetError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(IlcsetError):
    """Invalid inputs: malformed data files, incompatible arguments."""

    exit_code = 2


class BudgetExceededError(IlcsetError):
    """A configured enumeration or group-size budget would be exceeded."""

    exit_code = 3


class NumericalError(IlcsetError):
    """Numerical failure: degenerate posterior, empty truncated support."""

    exit_code = 4


class NonTerminationError(NumericalError):
    """A rejection sampler hit its iteration cap."""
