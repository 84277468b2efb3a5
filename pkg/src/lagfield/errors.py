"""Exception hierarchy.

Every error carries a short machine-readable ``category`` used by the
command line driver for its exit report.
"""


class LagfieldError(Exception):
    category = "error"


class SizingError(LagfieldError, ValueError):
    category = "sizing"


class MisuseError(LagfieldError, ValueError):
    category = "misuse"


class ShapeError(LagfieldError, ValueError):
    category = "shape"


class CapabilityError(LagfieldError, TypeError):
    category = "capability"


class NoRealSolutionError(LagfieldError, ValueError):
    category = "no_real_solution"


class DegenerateMeshError(LagfieldError, ValueError):
    category = "degenerate_mesh"


class InputError(LagfieldError, ValueError):
    category = "input"


class ConditioningError(LagfieldError, ArithmeticError):
    """Newton Jacobian (numerically) singular."""

    category = "conditioning"

    def __init__(self, message, sigma_min=0.0):
        super().__init__(message)
        self.sigma_min = sigma_min


class NonConvergenceError(LagfieldError, ArithmeticError):
    category = "non_convergence"

    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class PropagationError(LagfieldError):
    """Inner solve failure, tagged with the time index (and trajectory)."""

    category = "propagation"

    def __init__(self, message, time_index=None, trajectory=None, cause=None):
        super().__init__(message)
        self.time_index = time_index
        self.trajectory = trajectory
        self.cause = cause
        if cause is not None:
            self.category = getattr(cause, "category", self.category)


class TrainingError(LagfieldError, FloatingPointError):
    category = "non_finite"

    def __init__(self, message, epoch=None, batch=None, last_good=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.last_good = last_good


class FormatError(LagfieldError, ValueError):
    category = "format"
