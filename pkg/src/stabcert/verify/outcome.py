from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SAFE_INCOMPLETE = "safe-incomplete"
SAFE_COMPLETE = "safe-complete"
UNSAFE = "unsafe"
UNKNOWN = "unknown"
STATUSES = (SAFE_INCOMPLETE, SAFE_COMPLETE, UNSAFE, UNKNOWN)


@dataclass
class VerifyOutcome:
    """Result of certifying one ball.

    ``bound`` is a certified lower bound on the defended margin (the center's
    margin sign times the margin) when one was computed; ``stage`` names the
    stage that decided the outcome: "pgd", "alpha-crown" or "bab".
    """
    status: str
    bound: float | None = None
    counterexample: np.ndarray | None = None
    stage: str = ""
    domains: int = 0
    stage_times: dict = field(default_factory=dict)
    stats: object = None    # search statistics when branch and bound ran

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    @property
    def safe(self) -> bool:
        return self.status in (SAFE_INCOMPLETE, SAFE_COMPLETE)

    @property
    def label(self) -> str:
        """Category name used in summary tables (unsafe split by detecting stage)."""
        if self.status == UNSAFE and self.stage == "pgd":
            return "unsafe-PGD"
        return self.status

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "status": self.status,
            "label": self.label,
            "stage": self.stage,
            "bound": None if self.bound is None or not np.isfinite(self.bound) else float(self.bound),
            "counterexample": None if self.counterexample is None
            else [float(v) for v in self.counterexample],
            "domains": self.domains,
        }
        if timing:
            out["stage_times"] = {k: float(v) for k, v in self.stage_times.items()}
        return out
