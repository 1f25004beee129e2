"""Poisson shard arrivals and the per-device shard buffer.

Arrival counts are in shards. A shard is ``shard_size`` labelled samples; only
the learner ever looks inside one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_M_MAX = 64


@dataclass(frozen=True)
class ArrivalParams:
    rate: float
    shard_size: int = 10
    m_max: int = DEFAULT_M_MAX

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError(f"devices.rate must be > 0, got {self.rate!r}")
        if int(self.shard_size) != self.shard_size or self.shard_size < 1:
            raise ConfigError(f"task.shard_size must be a positive integer, got {self.shard_size!r}")
        if self.m_max < 0:
            raise ConfigError(f"arrivals.m_max must be >= 0, got {self.m_max!r}")


def sample_arrivals(params: ArrivalParams, rng: np.random.Generator, size=None):
    """Shards arriving in one round, ``min(Poisson(rate), m_max)``."""
    draw = np.minimum(rng.poisson(params.rate, size=size), params.m_max)
    return int(draw) if size is None else draw


def generate_shard(task, rng: np.random.Generator, shard_size: int = 10):
    """``shard_size`` i.i.d. labelled samples from the task distribution."""
    return task.sample(shard_size, rng)


class ShardBuffer:
    """FIFO of shards waiting to be consumed by local training."""

    def __init__(self):
        self._shards = deque()
        self.total_pending_samples = 0

    def __len__(self):
        return len(self._shards)

    def push(self, shard):
        self._shards.append(shard)
        self.total_pending_samples += len(shard[1])

    def drain(self):
        """Remove and return all pending shards, oldest first."""
        out = list(self._shards)
        self._shards.clear()
        self.total_pending_samples = 0
        return out
