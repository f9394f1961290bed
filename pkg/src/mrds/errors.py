"""Exception types shared across the package.

Exit-code mapping used by the CLI: config/validation problems exit 2,
structural check failures exit 3, numeric non-convergence exits 4.
"""


class MrdsError(Exception):
    """Base class for all package errors."""


class SchemaError(MrdsError):
    """Config text is malformed or has wrong types/keys."""


class StochasticityError(MrdsError):
    """Some vertex's outgoing edge weights do not sum to 1."""


class DegreeError(MrdsError):
    """An atom map has degree < 2 or a vanishing leading coefficient."""


class WeightError(MrdsError):
    """An atom weight is zero or negative."""


class NotIrreducible(MrdsError):
    """The edge graph is not strongly connected."""


class NoConvergence(MrdsError):
    """An iterative solver exhausted its budget."""


class DeadEnd(MrdsError):
    """A vertex with no outgoing (or incoming) edge was reached."""


class BudgetExceeded(MrdsError):
    """Node budget hit before the requested depth (results stay valid,
    callers usually set a flag instead of raising this)."""


class WindowTooSmall(MrdsError):
    """A grid sweep had to clamp reads outside the window (reported via
    counters, not raised)."""
