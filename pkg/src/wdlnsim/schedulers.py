"""Transmission schedulers and the effectivity score.

A scheduler sees an :class:`ObservedState` plus the per-device success
probabilities implied by the current gains, and returns a
:class:`ScheduleDecision` with exactly ``W`` devices selected. After the round
the engine calls ``observe`` with what the AP learned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MissingStateInfo


@dataclass(frozen=True)
class ObservedState:
    gains: np.ndarray
    n: np.ndarray | None = None
    round: int = 1


@dataclass(frozen=True)
class ScheduleDecision:
    a: np.ndarray
    # Bench schedules everyone and is exempt from the sum(a) == W constraint
    exempt: bool = False

    @property
    def scheduled(self):
        return np.flatnonzero(self.a)


@dataclass(frozen=True)
class RoundFeedback:
    """What the AP knows once the aggregation phase of round ``round`` is over."""

    round: int
    a: np.ndarray
    x: np.ndarray
    # n + m reported by each delivered device; meaningless where x is False
    reports: np.ndarray


def top_w(scores, W: int) -> np.ndarray:
    """Boolean mask of the ``W`` highest scores; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=float)
    a = np.zeros(scores.shape[0], dtype=bool)
    if W > 0:
        a[np.argsort(-scores, kind="stable")[:W]] = True
    return a


def greedy_scores(n, theta, success_probs):
    """Expected delivered sample mass ``p_u (n_u + theta_u)`` for each device."""
    return np.asarray(success_probs, dtype=float) * (np.asarray(n, dtype=float) + np.asarray(theta, dtype=float))


def greedy_policy(state: ObservedState, theta, success_probs, W: int) -> ScheduleDecision:
    """Schedule the ``W`` devices with the largest expected delivered mass."""
    if state.n is None:
        raise MissingStateInfo("greedy policy needs the per-device backlog n")
    return ScheduleDecision(top_w(greedy_scores(state.n, theta, success_probs), W))


def effectivity_score(n_plus_m, scheduled, delivered, gamma: float) -> float:
    """Delivered sample mass minus ``gamma`` times the undelivered mass."""
    n_plus_m = np.asarray(n_plus_m, dtype=float)
    delivered = np.asarray(delivered, dtype=bool)
    if np.any(delivered & ~np.asarray(scheduled, dtype=bool)):
        raise ValueError("a device cannot deliver without being scheduled")
    return float(n_plus_m[delivered].sum() - gamma * n_plus_m[~delivered].sum())


def effectivity_score_rearranged(n_plus_m, scheduled, delivered, gamma: float) -> float:
    """Same score written as ``sum a x (1+gamma)(n+m) - gamma sum (n+m)``."""
    n_plus_m = np.asarray(n_plus_m, dtype=float)
    ax = np.asarray(scheduled, dtype=float) * np.asarray(delivered, dtype=float)
    return float(np.sum(ax * (1.0 + gamma) * n_plus_m) - gamma * np.sum(n_plus_m))


class Scheduler:
    """Base class. Subclasses override :meth:`decide` and optionally :meth:`observe`."""

    name = "base"
    needs_backlog = False
    # True when the AP does not get the per-device backlog n
    partial_observation = False
    forces_delivery = False

    def reset(self, num_devices: int, rng: np.random.Generator | None = None):
        self.num_devices = num_devices
        self.rng = rng

    def decide(self, state: ObservedState, success_probs, W: int) -> ScheduleDecision:
        raise NotImplementedError

    def observe(self, feedback: RoundFeedback):
        pass


class Bench(Scheduler):
    """Every device transmits and every transmission succeeds."""

    name = "bench"
    forces_delivery = True

    def decide(self, state, success_probs, W):
        return ScheduleDecision(np.ones(len(state.gains), dtype=bool), exempt=True)


def bench(num_devices: int) -> ScheduleDecision:
    return ScheduleDecision(np.ones(num_devices, dtype=bool), exempt=True)


def round_robin(round_index: int, U: int, W: int) -> ScheduleDecision:
    """Devices ``(round * W + j) mod U`` for ``j < W``; ``round_index`` counts from 0."""
    a = np.zeros(U, dtype=bool)
    a[(round_index * W + np.arange(W)) % U] = True
    return ScheduleDecision(a)


class RoundRobin(Scheduler):
    name = "rr"

    def reset(self, num_devices, rng=None):
        super().reset(num_devices, rng)
        self.counter = 0

    def decide(self, state, success_probs, W):
        decision = round_robin(self.counter, len(state.gains), W)
        self.counter += 1
        return decision


def w_max(state: ObservedState, W: int) -> ScheduleDecision:
    """The ``W`` strongest channel gains."""
    return ScheduleDecision(top_w(state.gains, W))


class WMax(Scheduler):
    name = "wmax"

    def decide(self, state, success_probs, W):
        return w_max(state, W)


class AlsaPI(Scheduler):
    """Greedy policy driven by the true arrival rates."""

    name = "alsa-pi"
    needs_backlog = True

    def __init__(self, true_rates):
        self.true_rates = np.asarray(true_rates, dtype=float)

    def decide(self, state, success_probs, W):
        if state.n is None:
            raise MissingStateInfo("ALSA-PI needs the per-device backlog n")
        return greedy_policy(state, self.true_rates, success_probs, W)


def alsa_pi(state: ObservedState, true_theta_p, success_probs, W: int) -> ScheduleDecision:
    if state.n is None:
        raise MissingStateInfo("ALSA-PI needs the per-device backlog n")
    return greedy_policy(state, true_theta_p, success_probs, W)


SCHEDULER_NAMES = ("bench", "rr", "wmax", "alsa-pi", "balsa", "balsa-po")


def make_scheduler(name: str, *, true_rates=None, options=None) -> Scheduler:
    """Build a scheduler by its CLI name."""
    options = dict(options or {})
    if name == "bench":
        return Bench()
    if name == "rr":
        return RoundRobin()
    if name == "wmax":
        return WMax()
    if name == "alsa-pi":
        if true_rates is None:
            raise ConfigError("scheduler alsa-pi needs the true device rates")
        return AlsaPI(true_rates)
    if name in ("balsa", "balsa-po"):
        from .bayes import Balsa, BalsaPO

        cls = Balsa if name == "balsa" else BalsaPO
        return cls(**options)
    raise ConfigError(f"scheduler.name must be one of {', '.join(SCHEDULER_NAMES)}; got {name!r}")
