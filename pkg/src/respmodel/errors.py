"""Exception hierarchy shared by all respmodel modules.

Validation errors (bad inputs, mismatched grids) and numerical errors
(diverging iterations) are kept in separate branches so the CLI can map
them onto stable exit codes.
"""


class RespModelError(Exception):
    """Base class for all respmodel errors."""


class ValidationError(RespModelError, ValueError):
    """Invalid inputs: shapes, grids, configs, ranges."""


class NumericalError(RespModelError, RuntimeError):
    """Numerical failure: divergence, non-finite energies."""


class GridMismatch(ValidationError):
    """Two grid objects do not share dims/spacing/origin."""


class InvalidDims(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class OutOfGrid(ValidationError):
    pass


class TooShort(ValidationError):
    pass


class EmptyList(ValidationError):
    pass


class InconsistentPhaseCount(ValidationError):
    pass


class TooFewPatients(ValidationError):
    pass


class NonConvergence(NumericalError):
    pass


class NonFiniteEnergy(NumericalError):
    pass
