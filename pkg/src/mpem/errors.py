"""Exception and warning types shared across the package."""


class DimensionError(ValueError):
    """Array or grid sizes are inconsistent with each other."""


class InvalidLevels(ValueError):
    pass


class RangeError(ValueError):
    """An index or parameter lies outside its legal range."""


class ConvergenceError(RuntimeError):
    pass


class DegenerateError(ValueError):
    """A quadratic form that must be positive evaluated to zero."""


class SolveError(RuntimeError):
    pass


class EmptyInputError(ValueError):
    pass


class ZeroSignalError(ValueError):
    pass


class MaxIterWarning(RuntimeWarning):
    """EM stopped at the iteration cap before the convergence test fired."""
