"""Shared exception types."""


class MsfError(Exception):
    """Base class for pipeline errors."""


class ShapeError(MsfError, ValueError):
    """Operands have incompatible grid shapes."""


class ConfigError(MsfError, ValueError):
    """A configuration is internally inconsistent or incompatible."""


class DivergenceError(MsfError, RuntimeError):
    """Training produced a non-finite loss.

    Carries a diagnostic record: the step at which divergence was detected
    and the loss curve up to that point.
    """

    def __init__(self, step: int, loss_curve: list):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.loss_curve = list(loss_curve)
