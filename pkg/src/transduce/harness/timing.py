"""Learning-speed measurement."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np


@dataclass
class LearningTimeStats:
    times: list

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def mean(self) -> float:
        return float(np.mean(self.times)) if self.times else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.times)) if self.times else float("nan")

    @property
    def total(self) -> float:
        # T = n * tau_l
        return self.n * self.mean if self.times else 0.0


def measure_learning_time(store, samples) -> LearningTimeStats:
    """Time ``consolidate_add`` for each (pyramid, labels) pair or MemorySample."""
    times = []
    for item in samples:
        args = item if isinstance(item, tuple) else (item,)
        t0 = time.perf_counter()
        store.consolidate_add(*args)
        times.append(time.perf_counter() - t0)
    return LearningTimeStats(times)
