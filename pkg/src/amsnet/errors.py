"""Exception types shared across the package."""


class AmsError(Exception):
    """Base class for all errors raised by amsnet."""


class ShapeError(AmsError, ValueError):
    """Operand dimensions are incompatible."""


class ConfigError(AmsError, ValueError):
    """A configuration value is invalid (e.g. group count not dividing channels)."""


class InputError(AmsError, ValueError):
    """Data handed to an operation violates its preconditions."""


class NumericalError(AmsError, ArithmeticError):
    """A computation produced non-finite values or failed to converge.

    ``stage`` names where it happened, ``residual`` carries the convergence
    residual when one was measured, and ``epoch``/``step`` are filled in by the
    trainer when the failure occurs during training.
    """

    def __init__(self, message, stage=None, residual=None, epoch=None, step=None):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.residual = residual
        self.epoch = epoch
        self.step = step

    def __str__(self):
        parts = [self.message]
        if self.stage is not None:
            parts.append(f"stage={self.stage}")
        if self.residual is not None:
            parts.append(f"residual={self.residual:.3e}")
        if self.epoch is not None:
            parts.append(f"epoch={self.epoch}")
        if self.step is not None:
            parts.append(f"step={self.step}")
        return " | ".join(parts)

    def to_dict(self):
        return {
            "error": "numerical",
            "message": self.message,
            "stage": self.stage,
            "residual": self.residual,
            "epoch": self.epoch,
            "step": self.step,
        }
