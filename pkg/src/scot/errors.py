"""Exception and warning types shared across the package."""


class ScotError(Exception):
    """Base class for input and contract errors."""


class ConfigError(ScotError):
    """Malformed or incomplete configuration; message names the field path."""


class CycleDetected(ScotError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("graph has a cycle: " + " -> ".join(str(c) for c in self.cycle))


class DomainViolation(ScotError):
    """A tabulated equation was queried outside its declared box."""


class GridTooLarge(ScotError):
    """Product grid exceeds the configured atom cap."""


class InstanceTooLarge(ScotError):
    """Exact LP oracle called on more atoms than it is meant for."""


class DimensionMismatch(ScotError):
    pass


class CoordinateCountMismatch(ScotError):
    pass


class AxisOutOfRange(ScotError):
    pass


class RankDeficient(ScotError):
    """Parent design matrix is singular."""


class Unsupported(ScotError):
    pass


class NonConvergence(UserWarning):
    """Iterative solver stopped at its iteration cap.

    Raised only through ``warnings.warn``; results also carry a
    ``converged`` flag so callers can decide what to do.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
