"""Exception types raised across the package."""


class MVARError(Exception):
    """Base class for all package errors."""


class InvalidArgument(MVARError, ValueError):
    pass


class InvalidConfig(MVARError, ValueError):
    pass


class InvalidMask(MVARError, ValueError):
    pass


class InvalidTarget(MVARError, ValueError):
    pass


class InvalidInput(MVARError, ValueError):
    pass


class CorruptPyramid(MVARError, ValueError):
    pass


class NumericFailure(MVARError, ArithmeticError):
    pass


class InternalConsistency(MVARError, RuntimeError):
    pass


class UnsupportedFormat(MVARError, IOError):
    pass


class CorruptCheckpoint(MVARError, IOError):
    pass
