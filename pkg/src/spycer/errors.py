"""Exception hierarchy shared across the package.

Three families matter to the CLI exit-code contract: usage problems are
handled by argparse itself, DataError maps to exit code 2, NumericError
to exit code 3.
"""


class SpycerError(Exception):
    """Base class for all package-specific errors."""


class DataError(SpycerError):
    """Invalid, missing, or inconsistent input data."""


class NumericError(SpycerError):
    """Numerical failure: instability, NaN loss, gradient-check failure."""


class OutOfBounds(DataError):
    """Sensor coordinates outside the grid or inside the 3-pixel border margin."""


class MissingVariable(DataError):
    """Requested grid (LST date or monthly index) absent from the scene."""


class MissingReading(DataError):
    """Sensor has no reading for the requested date."""


class InsufficientData(DataError):
    """Fewer training rows or sensors than an operation requires."""


class InsufficientSensors(DataError):
    """Not enough sensors to build a cross-validation fold plan."""


class PlacementFailure(DataError):
    """Synthetic sensor placement constraints could not be satisfied."""


class Degenerate(DataError):
    """Feature matrix carries no usable signal (all rows identical)."""


class NoSensors(DataError):
    """Interpolation requested with zero sensors."""


class EmptyInput(DataError):
    """Metric requested on empty prediction/truth vectors."""


class NonPositiveResistance(DataError):
    """Aerodynamic resistance must be strictly positive."""


class ShapeMismatch(SpycerError):
    """Tensor operands have incompatible shapes."""


class NotScalar(SpycerError):
    """backward() requires a scalar loss tensor."""


class StabilityFailure(NumericError):
    """Explicit integration sub-step underflowed while chasing stability."""
