"""Exception types raised across the package."""


class LevFanoError(Exception):
    """Base class for all package errors."""


class InvalidInput(LevFanoError, ValueError):
    pass


# physics_core
class NoConvergence(LevFanoError):
    pass


class NotConfining(LevFanoError):
    pass


class ImaginaryFrequency(LevFanoError):
    pass


# langevin_engine
class Unstable(LevFanoError):
    """Particle left the trap during integration."""


class ResolutionGuard(LevFanoError):
    """Timestep too coarse for the oscillation frequency."""


# spectral_estimation
class TooShort(LevFanoError):
    pass


# lineshape_fitting
class NoPeak(LevFanoError):
    pass


class NoDip(LevFanoError):
    pass


class NotConvergedWarning(UserWarning):
    pass


# charge_inference
class DegenerateDesign(LevFanoError):
    pass


class NegativeMass(LevFanoError):
    pass


# experiment config
class ParseError(LevFanoError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ValidationError(LevFanoError, ValueError):
    def __init__(self, field, constraint):
        self.field = field
        self.constraint = constraint
        super().__init__(f"{field}: {constraint}")
