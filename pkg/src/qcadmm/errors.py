"""Exception types shared across the solver."""


class QcadmmError(Exception):
    """Base class for all solver errors."""


class InvalidProblemError(QcadmmError, ValueError):
    """Problem data fails validation (dimensions, senses, value ranges)."""


class PoleError(QcadmmError, ArithmeticError):
    """Secular function evaluated too close to a pole of its denominator."""


class InfeasibleConstraintError(QcadmmError, RuntimeError):
    """No multiplier brackets a root: the constraint set appears to be empty."""


class ConfigurationError(QcadmmError, RuntimeError):
    """Solver parameters violate a precondition (e.g. penalty weight too small)."""
