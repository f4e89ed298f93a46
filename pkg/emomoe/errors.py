"""Exception types raised across the package."""

from __future__ import annotations


class EmomoeError(Exception):
    """Base class for every error this package raises on purpose."""


class DimensionError(EmomoeError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(EmomoeError, ValueError):
    """Invalid configuration value, key or stage."""


class ContractError(EmomoeError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(EmomoeError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class TargetIndexError(EmomoeError, IndexError):
    """A class index lies outside the logits' class range."""


class AdapterNotFoundError(EmomoeError, KeyError):
    """No adapter set is registered under the requested name."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the message readable
        return str(self.args[0]) if self.args else ""


class RunNotFoundError(EmomoeError, LookupError):
    """The ledger holds no run under the requested id."""


class CapabilityError(EmomoeError, TypeError):
    """The requested operation is not supported by this component."""


class FormatError(EmomoeError, ValueError):
    """A checkpoint or data file is malformed."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FreezeViolationError(EmomoeError, RuntimeError):
    """A parameter outside the stage mask changed during training."""
