"""
errors.py

Exception types raised across the pipeline. Each carries the exit code the
CLI returns when it surfaces, so a failing run ends with one diagnostic line
and a code that tells the caller what went wrong.
"""


class RangeSegError(Exception):
    """Base class for all expected pipeline failures."""
    exit_code = 1


class ConfigError(RangeSegError):
    """Invalid or inconsistent configuration."""
    exit_code = 3


class FormatError(RangeSegError):
    """A scan, label or checkpoint file could not be decoded."""
    exit_code = 4

    def __init__(self, message, path=None, index=None):
        self.path = path
        self.index = index
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class EmptyInputError(FormatError):
    """Input holds nothing to work on (no points, no labeled points)."""


class ShapeError(RangeSegError):
    """Tensor or array shapes do not agree."""
    exit_code = 5


class DegeneratePointError(RangeSegError):
    """A point sits at the sensor origin (zero depth) and cannot be projected."""
    exit_code = 5

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class TrainingDivergedError(RangeSegError):
    """Loss became NaN/inf during training."""
    exit_code = 6

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, batch {batch} (loss={loss})")
