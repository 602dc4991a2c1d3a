"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar argument is outside its allowed range."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but numerically degenerate (e.g. zero norm)."""


class CacheProtocolError(RuntimeError):
    """The rolling cache was driven out of its store/retrieve order.

    This always indicates a scheduling bug in the caller, never a data
    problem, so it is a hard failure rather than a silent recompute.
    """
