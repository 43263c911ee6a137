"""Exception hierarchy shared by all redispatch modules."""

from __future__ import annotations


class RedispatchError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RedispatchError, ValueError):
    """Input data violates a documented invariant."""


class ParseError(RedispatchError, ValueError):
    """Malformed case or forecast file.

    ``line`` and ``column`` are 1-based positions in the offending text when
    they are known.
    """

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)


class DimensionMismatch(RedispatchError, ValueError):
    pass


class SingularTopology(RedispatchError):
    """Reduced susceptance matrix is singular, i.e. the network is disconnected."""


class IslandingOutage(RedispatchError):
    """Removing the requested branch splits the network."""


class NotPSD(RedispatchError, ValueError):
    pass


class DegenerateData(RedispatchError, ValueError):
    pass


class FitDivergence(RedispatchError):
    pass


class OutOfSupport(RedispatchError, ValueError):
    pass


class DomainError(RedispatchError, ValueError):
    pass


class Unbalanced(RedispatchError, ValueError):
    """Power conservation residual exceeds tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        self.residual = residual
        super().__init__(message)


class EmptyRecords(RedispatchError, ValueError):
    pass


class MaxIterations(RedispatchError):
    def __init__(self, message: str, log=None):
        self.log = log
        super().__init__(message)


class InfeasibleSubproblem(RedispatchError):
    """A redispatch subproblem was reported infeasible by the solver.

    ``constraints`` holds the (outage, branch) pairs active at that iteration
    and ``diagnosis`` the minimal-slack report when one could be computed.
    """

    def __init__(self, message: str, constraints=None, diagnosis=None, log=None):
        self.constraints = list(constraints or [])
        self.diagnosis = diagnosis
        self.log = log
        super().__init__(message)


class SolverFailure(RedispatchError):
    pass
