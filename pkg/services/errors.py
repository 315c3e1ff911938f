"""Exception hierarchy shared by the numerical services and the CLI."""
from __future__ import annotations

from typing import List, Optional


class MinPriceError(Exception):
    """Base class for every engine failure."""


class AssumptionViolated(MinPriceError):
    def __init__(self, which: str, margin: Optional[float] = None, detail: str = "") -> None:
        self.which = which
        self.margin = margin
        msg = f"Assumption violated: {which}"
        if margin is not None:
            msg += f" (margin {margin:.6g})"
        if detail:
            msg += f" - {detail}"
        super().__init__(msg)


class DomainError(MinPriceError, ValueError):
    pass


class UnsupportedExponent(MinPriceError, ValueError):
    pass


class InstabilityDetected(MinPriceError):
    pass


class NoConvergence(MinPriceError):
    def __init__(self, last_delta: float, trace: Optional[List[float]] = None) -> None:
        self.last_delta = float(last_delta)
        self.trace = list(trace or [])
        super().__init__(
            f"Truncation schedule exhausted without convergence: last delta {self.last_delta:.3e}, "
            f"trace {[f'{d:.3e}' for d in self.trace]}"
        )


class GridMismatch(MinPriceError, ValueError):
    pass


class NoTrades(MinPriceError):
    pass


class InsufficientData(MinPriceError, ValueError):
    pass
