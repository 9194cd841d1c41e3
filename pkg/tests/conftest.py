from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from transduce import FeaturePyramid, LabelMap, MemoryStore, ResolutionSchedule

settings.register_profile("ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def random_pyramid(rng, res=(8, 8), n=3, channels=4, dist="normal") -> FeaturePyramid:
    sched = ResolutionSchedule.halving(res, n)
    draw = rng.standard_normal if dist == "normal" else rng.random
    return FeaturePyramid(sched, tuple(draw((sched.p(l), channels)) for l in range(1, n + 1)))


def random_store(rng, m=3, res=(8, 8), n=3, channels=4, num_classes=3, n_sp=0) -> MemoryStore:
    store = MemoryStore(n_sp=n_sp)
    for _ in range(m):
        pyr = random_pyramid(rng, res, n, channels)
        store.consolidate_add(pyr, LabelMap.from_classes(rng.integers(0, num_classes, res), num_classes))
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
