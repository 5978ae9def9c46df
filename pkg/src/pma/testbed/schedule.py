"""Warmup-stable-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class WsdSchedule:
    lr_peak: float
    lr_end: float = 0.0
    warmup_steps: int = 0
    stable_steps: int = 0
    decay_steps: int = 0

    def __post_init__(self) -> None:
        if not self.lr_peak > 0:
            raise ValueError(f"lr_peak must be > 0, got {self.lr_peak}")
        if not 0 <= self.lr_end <= self.lr_peak:
            raise ValueError(f"need 0 <= lr_end <= lr_peak, got lr_end={self.lr_end}")
        for name in ("warmup_steps", "stable_steps", "decay_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.stable_steps + self.decay_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WsdSchedule":
        return cls(**d)


def lr_at(schedule: WsdSchedule, step: int) -> float:
    """Learning rate for update ``step`` (0-based)."""
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside schedule of {schedule.total_steps} steps")
    if step < schedule.warmup_steps:
        return schedule.lr_peak * step / schedule.warmup_steps
    t = step - schedule.warmup_steps - schedule.stable_steps
    if t < 0:
        return schedule.lr_peak
    span = schedule.lr_peak - schedule.lr_end
    return schedule.lr_end + 0.5 * span * (1.0 + math.cos(math.pi * t / schedule.decay_steps))
