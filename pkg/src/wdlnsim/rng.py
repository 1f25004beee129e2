"""Deterministic random streams.

Every random draw in a simulation comes from a stream keyed by
``(base_seed, instance, device, purpose)``. Schedulers never share a stream
with the environment, so two schedulers run on the same instance see the
same channel gains, arrivals and transmission uniforms (paired comparison).
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "fading": 0,
    "arrivals": 1,
    "transmission": 2,
    "data": 3,
    "sgd": 4,
    "scheduler": 5,
    "test": 6,
    "probe": 7,
    "init": 8,
    "mdp": 9,
}

# device slot used by instance-wide streams
GLOBAL = 1 << 20


def stream(base_seed: int, instance: int, device: int, purpose: str) -> np.random.Generator:
    """Return the generator for one ``(instance, device, purpose)`` cell."""
    key = (int(instance), int(device), PURPOSES[purpose])
    return np.random.default_rng(np.random.SeedSequence(int(base_seed), spawn_key=key))
