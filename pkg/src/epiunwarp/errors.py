"""Exception types raised across the package."""


class EpiUnwarpError(Exception):
    """Base class for all package errors."""


class VolumeFormatError(EpiUnwarpError):
    """File is not a NIfTI-1 single file (or raw fixture) we can parse."""


class UnsupportedError(EpiUnwarpError):
    """Valid file using a feature outside the supported subset."""


class ShapeError(EpiUnwarpError, ValueError):
    pass


class ValidationError(EpiUnwarpError, ValueError):
    """Volume contents violate an invariant (NaN/Inf, bad voxel sizes)."""


class SingularOperatorError(EpiUnwarpError, ArithmeticError):
    pass


class PreconditionerError(EpiUnwarpError, ArithmeticError):
    pass


class BarrierError(EpiUnwarpError, ValueError):
    """Field map violates |d/dv b| < 1."""


class DescentDirectionError(EpiUnwarpError, ValueError):
    pass
