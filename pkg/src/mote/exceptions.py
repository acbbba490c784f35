"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2 and numeric failures exit 3.
"""


class MoteError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MoteError, ValueError):
    """Invalid configuration (dimensions, counts, infeasible requests)."""


class InputError(MoteError, ValueError):
    """Invalid data handed to an operation (bad token ids, malformed files)."""


class EmptyClassError(InputError):
    """An averaging step was asked for a class with no members."""


class NumericError(MoteError, ArithmeticError):
    """Non-finite values or a diverging optimisation."""
