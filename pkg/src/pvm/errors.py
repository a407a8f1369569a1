"""Exception hierarchy shared by every pvm module."""

from __future__ import annotations


class PVMError(Exception):
    """Base class for all library errors."""


class ShapeError(PVMError, ValueError):
    """Operands have incompatible shapes."""


class PreconditionError(PVMError, ValueError):
    """An operation precondition does not hold (e.g. no valid pixel)."""


class FillError(PVMError, RuntimeError):
    """Iterative filling ran out of passes before the mask became all-valid."""

    def __init__(self, remaining_invalid: int, iters: int):
        self.remaining_invalid = int(remaining_invalid)
        self.iters = int(iters)
        super().__init__(
            f"filling did not converge after {iters} passes; "
            f"{remaining_invalid} positions still invalid"
        )


class NumericError(PVMError, ArithmeticError):
    """A non-finite value appeared in a computation."""


class DetachedParameterError(PVMError, RuntimeError):
    """A registered parameter does not contribute to the loss."""


class ConfigError(PVMError, ValueError):
    """Experiment configuration failed schema validation."""


class InfeasiblePolicyError(PVMError, ValueError):
    """A mask policy cannot be satisfied for the requested size."""


class CheckpointError(PVMError, RuntimeError):
    """Checkpoint is missing, corrupt or was produced by another config."""
