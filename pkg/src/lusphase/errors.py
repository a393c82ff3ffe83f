"""Exception hierarchy shared by the pipeline stages."""


class LusphaseError(Exception):
    """Base class for all pipeline errors."""


class FormatError(LusphaseError):
    """Unsupported or malformed file content."""


class DimensionError(LusphaseError):
    """Image geometry does not satisfy an operation's precondition."""


class ParameterError(LusphaseError, ValueError):
    """Invalid filter or transform parameter."""


class ConfigError(LusphaseError, ValueError):
    """Invalid run, model or fusion configuration."""


class ShapeError(LusphaseError, ValueError):
    """Tensor shapes are inconsistent."""


class StateError(LusphaseError, RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


class DomainError(LusphaseError, ValueError):
    """Metric undefined for the given input."""


class NumericDivergenceError(LusphaseError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
