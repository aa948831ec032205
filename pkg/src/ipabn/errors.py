"""Error hierarchy for kernels, services and tools.

Every error subclasses ToolError so its message passes through FastMCP's
error masking to the client instead of a generic internal error. Messages
name the offending channel, shape, line or value.
"""

from __future__ import annotations

from fastmcp.exceptions import ToolError


class KernelError(ToolError):
    """Base class for all ipabn failures."""


class ShapeError(KernelError):
    pass


class EmptyInputError(KernelError):
    pass


class NonInvertibleActivationError(KernelError):
    pass


class GammaSingularError(KernelError):
    def __init__(self, channel: int, value: float, guard: float) -> None:
        self.channel = channel
        self.value = value
        super().__init__(
            f"gamma of channel {channel} is {value:.3e}, below the invertibility guard "
            f"{guard:.0e}; pi_inverse / BN-dagger are undefined. Use a non in-place "
            "strategy, fix gamma to 1, or clamp it after each optimizer step."
        )


class StatsError(KernelError):
    pass


class PlanError(KernelError):
    pass


class PlanFileError(PlanError):
    """Plan file unreadable or malformed; carries the line number when known."""


class StrategyMismatchError(KernelError):
    pass


class LedgerError(KernelError):
    pass


class NonFiniteError(KernelError):
    pass


class ConfigError(KernelError):
    pass


class DatasetError(KernelError):
    pass


class DivergenceError(KernelError):
    pass
