"""Exception hierarchy shared across the package."""


class StackopError(Exception):
    """Base class for all library errors."""


class DomainError(StackopError, ValueError):
    """Argument outside the domain of a mathematical function."""


class GridError(StackopError, ValueError):
    """Time grid incompatible with a dyadic index (breakpoints off-grid)."""


class DimensionError(StackopError, ValueError):
    """Shape or dimension mismatch between operands."""


class EnsembleMismatchError(StackopError, ValueError):
    """Processes from different Brownian ensembles were combined."""


class NotCheckableError(StackopError, TypeError):
    """Adaptedness cannot be checked for a process without a causal evaluator."""


class ExplosionError(StackopError, FloatingPointError):
    """Simulated state left the finite range."""

    def __init__(self, scenario, step, value):
        self.scenario = int(scenario)
        self.step = int(step)
        self.value = float(value)
        super().__init__(f"state exploded at scenario {self.scenario}, step {self.step} (value {self.value!r})")


class ConvergenceError(StackopError, RuntimeError):
    """Iterative solver did not reach its stationarity tolerance."""

    def __init__(self, message, last_iterate=None, grad_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


class RefusalError(StackopError, ValueError):
    """Request refused because its hypotheses cannot be certified (e.g. missing convexity modulus)."""


class GradientError(StackopError, RuntimeError):
    """Invalid use of the reverse-mode tape."""


class ConfigError(StackopError, ValueError):
    """Invalid run configuration."""


class TrainingDivergedError(StackopError, RuntimeError):
    """Training loss exceeded the divergence threshold."""
