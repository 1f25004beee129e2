"""Asynchronous FL round engine.

Each round runs three phases: the AP schedules ``W`` devices from the observed
gains (and backlog, when reported); every device trains on the shards that
arrived this round and folds the result into its aggregated gradient; the
scheduled devices transmit, and the AP applies the delivered updates weighted
by how many samples each device has contributed so far.

The per-device functions below operate on :class:`DeviceFlState`. The
:class:`World` keeps the same quantities as arrays and calls the shared
vectorised kernels, so both paths apply identical arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .arrivals import DEFAULT_M_MAX
from .channel import ChannelBank
from .errors import ConfigError, InvalidSchedule, NonFiniteGradient, ZeroDenominator
from .rng import stream
from .schedulers import ObservedState, RoundFeedback, Scheduler, effectivity_score

DEFAULT_N_MAX = 10**6


@dataclass(frozen=True)
class FlHyperParams:
    lam: float = 0.01
    beta: float = 0.001
    eta_d: float = 0.01
    local_epochs: int = 5
    local_batch: int = 10
    eta_sgd: float = 0.05
    n_max: int = DEFAULT_N_MAX

    def __post_init__(self):
        checks = {
            "lambda": self.lam >= 0,
            "beta": 0 <= self.beta < 1,
            "eta_d": self.eta_d > 0,
            "local_epochs": self.local_epochs >= 0,
            "local_batch": self.local_batch >= 1,
            "eta_sgd": self.eta_sgd > 0,
            "n_max": self.n_max >= 0,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"fl.{key} has an invalid value")


@dataclass
class CentralState:
    w: np.ndarray
    round: int = 0


@dataclass
class DeviceFlState:
    w_local: np.ndarray
    psi: np.ndarray
    n: int = 0
    N: int = 0
    d: int = 1
    m_last: int = 0


@dataclass(frozen=True)
class LocalUpdate:
    delta: np.ndarray
    sample_report: int


def dynamic_learning_rate(eta_d, d):
    """``eta_d * max(1, ln d)``; ``d`` may be an array."""
    if np.ndim(d):
        return eta_d * np.maximum(1.0, np.log(np.asarray(d, dtype=float)))
    return eta_d * max(1.0, math.log(d))


def advance_counters(n, N, scheduled, delivered, m, n_max):
    """Backlog and contributed-sample counters after one round.

    A delivered device empties its backlog into ``N``; everyone else adds
    this round's arrivals to the backlog, truncated at ``n_max``.
    """
    ok = np.logical_and(scheduled, delivered)
    total = np.asarray(n) + np.asarray(m)
    n_new = np.where(ok, 0, np.minimum(total, n_max))
    N_new = np.where(ok, np.asarray(N) + total, N)
    if np.ndim(n_new) == 0:
        return int(n_new), int(N_new)
    return n_new, N_new


def central_weights(N_all, reports, delivered):
    """Weights ``(N_u + n_u + m_u) / (sum_v N_v + sum_{delivered} (n_v + m_v))``.

    Zero for devices that did not deliver.
    """
    N_all = np.asarray(N_all, dtype=float)
    reports = np.asarray(reports, dtype=float)
    delivered = np.asarray(delivered, dtype=bool)
    if not delivered.any():
        return np.zeros_like(N_all)
    denom = N_all.sum() + reports[delivered].sum()
    if denom <= 0:
        raise ZeroDenominator("no samples have been contributed yet")
    return np.where(delivered, (N_all + reports) / denom, 0.0)


def local_train(device: DeviceFlState, central: CentralState, shards, learner, hyper: FlHyperParams,
                rng: np.random.Generator) -> LocalUpdate:
    """Broadcast, train on this round's shards, and form the local update.

    ``shards`` is a list of ``(X, y)`` shards (as drained from a
    :class:`~wdlnsim.arrivals.ShardBuffer`); it may be empty.
    """
    device.w_local = np.array(central.w, dtype=float)
    shards = list(shards or [])
    device.m_last = len(shards)
    if not shards:
        grad = np.zeros_like(device.psi)
    else:
        X = np.concatenate([sh[0] for sh in shards])
        y = np.concatenate([sh[1] for sh in shards])
        grad = learner.local_gradient(device.w_local, X, y, hyper, rng)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("learner returned a non-finite gradient")
    device.psi = grad + hyper.beta * device.psi
    eta = dynamic_learning_rate(hyper.eta_d, device.d)
    return LocalUpdate(delta=eta * device.psi, sample_report=device.n + device.m_last)


def reset_gradient_on_success(device: DeviceFlState, delivered: bool) -> DeviceFlState:
    if delivered:
        device.psi = np.zeros_like(device.psi)
        device.d = 1
    else:
        device.d += 1
    return device


def update_sample_counters(device: DeviceFlState, scheduled: bool, delivered: bool, m: int,
                           n_max: int = DEFAULT_N_MAX) -> DeviceFlState:
    if m < 0:
        raise ValueError("m must be nonnegative")
    device.n, device.N = advance_counters(device.n, device.N, scheduled, delivered, m, n_max)
    return device


def central_aggregate(central: CentralState, updates, all_N, delivered_set) -> CentralState:
    """Apply delivered updates to the central parameters.

    ``updates`` maps device index to :class:`LocalUpdate`; ``all_N`` is the
    per-device contributed-sample count before this round.
    """
    delivered_set = set(int(u) for u in delivered_set)
    if not delivered_set:
        return CentralState(central.w.copy(), central.round + 1)
    U = len(all_N)
    reports = np.zeros(U)
    mask = np.zeros(U, dtype=bool)
    for u in delivered_set:
        reports[u] = updates[u].sample_report
        mask[u] = True
    c = central_weights(all_N, reports, mask)
    w = central.w.copy()
    for u in sorted(delivered_set):
        w -= c[u] * updates[u].delta
    return CentralState(w, central.round + 1)


@dataclass
class RoundRecord:
    round: int
    a: np.ndarray
    x: np.ndarray
    n: np.ndarray
    m: np.ndarray
    F: float
    cum_reward: float
    gains: np.ndarray
    n_total: int
    stragglers: int
    weight_sum: float = 0.0
    loss: float | None = None
    accuracy: float | None = None


class Environment:
    """Exogenous randomness for one instance: fading, arrivals, transmission uniforms, data.

    Draws are made in per-device blocks so a round costs a handful of array
    lookups. The values seen in round ``t`` do not depend on the scheduler.
    """

    def __init__(self, rates, base_seed: int, instance: int, *, m_max: int = DEFAULT_M_MAX,
                 block: int = 512, task=None, shard_size: int = 10):
        self.rates = np.asarray(rates, dtype=float)
        self.U = len(self.rates)
        self.m_max = m_max
        self.block = block
        self.task = task
        self.shard_size = shard_size
        self._fading = [stream(base_seed, instance, u, "fading") for u in range(self.U)]
        self._arrivals = [stream(base_seed, instance, u, "arrivals") for u in range(self.U)]
        self._tx = [stream(base_seed, instance, u, "transmission") for u in range(self.U)]
        self._data = [stream(base_seed, instance, u, "data") for u in range(self.U)]
        self.sgd_rngs = [stream(base_seed, instance, u, "sgd") for u in range(self.U)]
        self._block_id = -1

    def _load(self, t):
        bid = (t - 1) // self.block
        if bid == self._block_id:
            return
        if bid != self._block_id + 1:
            raise ValueError("environment rounds must be visited in order")
        B = self.block
        self.fading_block = np.stack([r.exponential(1.0, size=B) for r in self._fading])
        self.arrival_block = np.stack([np.minimum(r.poisson(lam, size=B), self.m_max)
                                       for r, lam in zip(self._arrivals, self.rates)])
        self.tx_block = np.stack([r.random(size=B) for r in self._tx])
        self._block_id = bid

    def draws(self, t):
        """``(fading, arrivals, uniforms)`` for round ``t`` (1-based)."""
        self._load(t)
        i = (t - 1) % self.block
        return self.fading_block[:, i], self.arrival_block[:, i], self.tx_block[:, i]

    def shards(self, u, m):
        if m == 0:
            return None
        return self.task.sample(m * self.shard_size, self._data[u])


class World:
    """All mutable state of one simulation instance."""

    def __init__(self, channel: ChannelBank, rates, W, *, gamma: float = 0.01,
                 hyper: FlHyperParams | None = None, env: Environment, learner=None,
                 test_set=None, probe_set=None, snapshot_every: int = 5):
        self.channel = channel
        self.rates = np.asarray(rates, dtype=float)
        self.U = len(self.rates)
        if len(channel) != self.U:
            raise ConfigError("devices: channel and rate lists differ in length")
        self._W = W
        self.gamma = float(gamma)
        self.hyper = hyper or FlHyperParams()
        self.env = env
        self.learner = learner
        self.test_set = test_set
        self.probe_set = probe_set
        self.snapshot_every = snapshot_every
        self.round = 0
        self.n = np.zeros(self.U, dtype=np.int64)
        self.N = np.zeros(self.U, dtype=np.int64)
        self.d = np.ones(self.U, dtype=np.int64)
        self.arrived_total = np.zeros(self.U, dtype=np.int64)
        self.cum_reward = 0.0
        if learner is not None:
            self.central = CentralState(learner.init_params())
            self.psi = np.zeros((self.U,) + self.central.w.shape)

    def W_at(self, t):
        return int(self._W(t)) if callable(self._W) else int(self._W)

    def snapshot(self):
        probe = self.probe_set if self.probe_set is not None else self.test_set
        loss, _ = self.learner.evaluate(self.central.w, *probe)
        _, acc = self.learner.evaluate(self.central.w, *self.test_set)
        return loss, acc


def validate_decision(decision, U, W):
    a = np.asarray(decision.a)
    if a.shape != (U,) or a.dtype != bool:
        raise InvalidSchedule(f"schedule must be a boolean vector of length {U}")
    if not decision.exempt and int(a.sum()) != W:
        raise InvalidSchedule(f"scheduled {int(a.sum())} devices, constraint requires exactly {W}")
    return a


def run_round(world: World, scheduler: Scheduler) -> RoundRecord:
    t = world.round + 1
    W = world.W_at(t)
    fading, m, uniforms = world.env.draws(t)
    m = m.astype(np.int64)
    gains = world.channel.gains(fading)
    p = world.channel.success_probs(gains)

    # scheduling phase
    hide_n = getattr(scheduler, "partial_observation", False)
    obs = ObservedState(gains=gains, n=None if hide_n else world.n.copy(), round=t)
    a = validate_decision(scheduler.decide(obs, p, W), world.U, W)

    # local update phase: every device trains, scheduled or not
    if world.learner is not None:
        eta = dynamic_learning_rate(world.hyper.eta_d, world.d)
        w = world.central.w
        for u in range(world.U):
            shard = world.env.shards(u, int(m[u]))
            if shard is None:
                grad = 0.0
            else:
                grad = world.learner.local_gradient(w, shard[0], shard[1], world.hyper, world.env.sgd_rngs[u])
                if not np.all(np.isfinite(grad)):
                    raise NonFiniteGradient(f"device {u} produced a non-finite gradient")
            world.psi[u] = grad + world.hyper.beta * world.psi[u]

    # aggregation phase
    x = a.copy() if scheduler.forces_delivery else a & (uniforms < p)
    reports = world.n + m
    F = effectivity_score(reports, a, x, world.gamma)
    weight_sum = 0.0
    if world.learner is not None and x.any():
        try:
            c = central_weights(world.N, reports, x)
        except ZeroDenominator:
            c = None  # no data anywhere yet, so every delta is zero as well
        if c is not None:
            idx = np.flatnonzero(x)
            coef = c[idx] * eta[idx]
            world.central.w = world.central.w - np.tensordot(coef, world.psi[idx], axes=1)
            weight_sum = float(c.sum())
        world.psi[x] = 0.0
    elif x.any():
        denom = world.N.sum() + reports[x].sum()
        weight_sum = float((world.N[x].sum() + reports[x].sum()) / denom) if denom > 0 else 0.0

    n_before = world.n
    world.n, world.N = advance_counters(world.n, world.N, a, x, m, world.hyper.n_max)
    world.d = np.where(x, 1, world.d + 1)
    world.arrived_total += m
    world.round = t
    world.cum_reward += F
    if world.learner is not None:
        world.central.round = t

    scheduler.observe(RoundFeedback(round=t, a=a, x=x, reports=reports))

    loss = acc = None
    if world.learner is not None and world.snapshot_every and t % world.snapshot_every == 0:
        loss, acc = world.snapshot()
    return RoundRecord(round=t, a=a, x=x, n=n_before, m=m, F=F, cum_reward=world.cum_reward, gains=gains,
                       n_total=int(world.n.sum()), stragglers=int(world.U - x.sum()),
                       weight_sum=weight_sum, loss=loss, accuracy=acc)


def run(world: World, scheduler: Scheduler, rounds: int, rng=None, callback: Callable | None = None):
    """Reset ``scheduler`` for ``world`` and run ``rounds`` rounds; returns the records."""
    scheduler.reset(world.U, rng)
    out = []
    for _ in range(rounds):
        rec = run_round(world, scheduler)
        if callback is not None:
            callback(world, rec)
        out.append(rec)
    return out
