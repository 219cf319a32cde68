class ConvergenceError(RuntimeError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message, last_norm=None, history=None):
        super().__init__(message)
        self.last_norm = last_norm
        self.history = list(history) if history is not None else []


class StabilizabilityError(ValueError):
    """The plant cannot be stabilized (or detected) with the given weights."""


class InstabilityError(RuntimeError):
    """A closed loop is unstable; ``eigenvalues`` holds the offending modes."""

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class CalibrationError(RuntimeError):
    pass
