"""Exception types raised across the package."""


class ContractViolation(ValueError):
    """Input shapes or values break an operation's preconditions."""


class InvalidConfiguration(ValueError):
    """A model, draw set or run configuration cannot be constructed."""


class NonFiniteObjective(FloatingPointError):
    """The model returned a non-finite value at some draw."""

    def __init__(self, message, draw_index=None):
        super().__init__(message)
        self.draw_index = draw_index


class UnsupportedQuantity(ValueError):
    """A quantity of interest lacks the derivatives an operation needs."""


class DegenerateDraws(ValueError):
    """Draws have zero sample variance in some coordinate."""


class DegenerateNormalization(ValueError):
    """Trace normalization hit a zero standard deviation."""


class NotAtOptimum(RuntimeError):
    """Post-processing was requested at a point that is not a verified local minimum."""

    def __init__(self, message, grad_norm=None, min_curvature=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.min_curvature = min_curvature


class CGNotConverged(RuntimeError):
    """Conjugate gradient hit its iteration cap before reaching tolerance."""

    def __init__(self, message, x, residual, iterations):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.iterations = iterations
