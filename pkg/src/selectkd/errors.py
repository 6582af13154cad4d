class ParameterError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericError(ArithmeticError):
    """Raised when a loss or gradient turns non-finite.

    ``step`` carries the training step index when the failure happened
    inside a training loop, otherwise ``None``.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
