"""Exception types shared across the toolkit."""

from __future__ import annotations


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


class MaskError(ValueError):
    """Invalid modality subset mask."""


class SpecError(ValueError):
    """Invalid model or dataset specification."""


class StateError(RuntimeError):
    """Inputs were produced by mismatched prior calls."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class DomainError(ValueError):
    """Argument outside its mathematical domain."""


class EmptyInputError(ValueError):
    """An operation that needs at least one element got none."""


class CapabilityError(ValueError):
    """Request exceeds a documented operational limit."""


class ParseError(ValueError):
    """Malformed input file; carries the offending location."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class SweepError(RuntimeError):
    """Every run in a sweep failed."""


class SplitError(ValueError):
    """Dataset cannot be split as requested."""
