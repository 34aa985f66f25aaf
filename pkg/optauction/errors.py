"""Exception types raised by the optauction library.

Every error derives from a builtin exception so callers can catch either the
specific class or the builtin it refines. Reports (IC/IR checks, matroid
validation, Monte Carlo verdicts) never raise; they return their findings.
"""


class StructuralError(ValueError):
    """Raised when inputs disagree on dimensions or violate a structural invariant."""


class InfeasibleMassError(ValueError):
    """Raised when a normalized rule assigns more service mass than a type has."""


class InstanceTooLargeError(ValueError):
    """Raised when an enumeration, separation or flow guard would be exceeded."""


class RerouteCapacityError(ValueError):
    """Raised when a reroute would push a token transfer past its capacity."""


class NotInPolytopeError(ValueError):
    """Raised when a point handed to the rounding procedure is not in the polytope."""


class UnsupportedMechanismError(TypeError):
    """Raised when a mechanism or solver lacks a capability an operation needs."""


class SolverError(RuntimeError):
    """Raised when the LP engine does not report an optimal solution."""


class SchemaError(ValueError):
    """Raised when an instance or rule document fails validation.

    The message carries either the JSON field path or the line and column of
    the offending text.
    """
