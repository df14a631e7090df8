"""Shared result containers for the inference modules."""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = ["IntervalResult"]


@dataclass(frozen=True)
class IntervalResult:
    """A one- or two-sided confidence interval with provenance.

    ``method`` tags the producing analysis ("os", "rct", "combined");
    ``alpha`` records the level parameter as passed to that analysis.
    """

    lower: float
    upper: float
    method: str
    alpha: float
    point_estimate: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper
