"""Error types shared across the package.

ValidationError covers bad shapes, dtypes and malformed inputs (CLI exit
code 2), ConvergenceError covers fixed-point solves that exhaust their
iteration budget (CLI exit code 3).
"""


class DefregError(Exception):
    pass


class ValidationError(DefregError):
    pass


class ShapeError(ValidationError):
    pass


class ConvergenceError(DefregError):
    def __init__(self, message, residual=None, iterations=None, best=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.best = best
