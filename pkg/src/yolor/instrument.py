"""Process-wide call counters. Observation only: they never touch values."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class Counters:
    set_attention: int = 0       # blocks (sets) encoded
    head_evals: int = 0          # (list, position) pairs scored by the head
    feature_cross_rows: int = 0  # candidate rows pushed through the feature-cross MLP
    enabled: bool = True
    timings: dict = field(default_factory=dict)

    def add(self, name: str, amount: int) -> None:
        if self.enabled:
            setattr(self, name, getattr(self, name) + int(amount))

    def reset(self) -> None:
        self.set_attention = self.head_evals = self.feature_cross_rows = 0
        self.timings = {}

    def snapshot(self) -> dict:
        return {"set_attention": self.set_attention, "head_evals": self.head_evals,
                "feature_cross_rows": self.feature_cross_rows}


COUNTERS = Counters()


@contextmanager
def counting(enabled: bool = True):
    """Reset the global counters for the duration of the block."""
    prev = COUNTERS.enabled
    COUNTERS.reset()
    COUNTERS.enabled = enabled
    try:
        yield COUNTERS
    finally:
        COUNTERS.enabled = prev


@contextmanager
def timed(stage: str):
    t0 = time.perf_counter()
    try:
        yield
    finally:
        COUNTERS.timings[stage] = COUNTERS.timings.get(stage, 0.0) + time.perf_counter() - t0
