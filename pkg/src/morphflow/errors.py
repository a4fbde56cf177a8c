"""Exception hierarchy shared by all morphflow modules."""


class MorphflowError(Exception):
    """Base class for every error raised by morphflow."""


class InvalidArgumentError(MorphflowError, ValueError):
    pass


class FormatError(MorphflowError):
    """A persisted artifact has a bad magic number or truncated payload."""


class EmptyShapeError(MorphflowError):
    """No voxel survived the opacity threshold."""


class NumericalError(MorphflowError):
    """Base for failures of an iterative numerical procedure."""


class ConvergenceError(NumericalError):
    def __init__(self, message, duals=None):
        super().__init__(message)
        self.duals = duals


class DivergenceError(NumericalError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateProjectionError(NumericalError):
    pass


class RegistrationFailedError(NumericalError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class StalledDescentError(RegistrationFailedError):
    pass
