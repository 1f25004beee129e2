"""Posterior-sampling schedulers: BALSA and its partially observable variant.

Arrival rates get independent Gamma posteriors (Poisson likelihood, Jeffreys
prior by default). Rates are resampled only at stage boundaries; a stage ends
when it has run one round longer than the previous stage, or when the visit
count of some discretised (state, action) pair has more than doubled since
the stage began.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MissingStateInfo
from .schedulers import RoundFeedback, ScheduleDecision, Scheduler, greedy_scores, top_w

JEFFREYS_SHAPE = 0.5
DEFAULT_EPSILON_RATE = 1e-6


class PosteriorState:
    """Per-device Gamma posterior over Poisson arrival rates.

    Only the sufficient statistics are stored: total shards seen ``sum_m`` and
    the number of rounds they cover ``obs_rounds``. The posterior is
    ``Gamma(prior_shape + sum_m, prior_rate + obs_rounds)``; with the Jeffreys
    prior (shape 1/2, rate 0) a zero rate is replaced by ``epsilon_rate``.
    """

    def __init__(self, num_devices: int, prior_shape: float = JEFFREYS_SHAPE,
                 prior_rate: float = 0.0, epsilon_rate: float = DEFAULT_EPSILON_RATE):
        self.sum_m = np.zeros(num_devices, dtype=np.int64)
        self.obs_rounds = np.zeros(num_devices, dtype=np.int64)
        self.prior_shape = float(prior_shape)
        self.prior_rate = float(prior_rate)
        self.epsilon_rate = float(epsilon_rate)

    def __len__(self):
        return len(self.sum_m)

    def update(self, device: int, m_total: int, rounds_covered: int):
        if m_total < 0 or rounds_covered < 1:
            raise ValueError("need m_total >= 0 and rounds_covered >= 1")
        self.sum_m[device] += int(m_total)
        self.obs_rounds[device] += int(rounds_covered)
        return self

    def update_all(self, m, rounds_covered: int = 1):
        m = np.asarray(m, dtype=np.int64)
        if np.any(m < 0):
            raise ValueError("arrival counts must be nonnegative")
        self.sum_m += m
        self.obs_rounds += int(rounds_covered)
        return self

    @property
    def shape(self):
        return self.prior_shape + self.sum_m

    @property
    def rate(self):
        rate = self.prior_rate + self.obs_rounds.astype(float)
        return np.where(rate > 0, rate, self.epsilon_rate)

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def std(self):
        return np.sqrt(self.shape) / self.rate

    def copy(self):
        out = PosteriorState(len(self), self.prior_shape, self.prior_rate, self.epsilon_rate)
        out.sum_m = self.sum_m.copy()
        out.obs_rounds = self.obs_rounds.copy()
        return out


def posterior_update(post: PosteriorState, device: int, m_total: int, rounds_covered: int) -> PosteriorState:
    return post.update(device, m_total, rounds_covered)


def sample_theta(post: PosteriorState, rng: np.random.Generator) -> np.ndarray:
    """One independent Gamma draw per device."""
    return rng.gamma(post.shape, 1.0 / post.rate)


@dataclass
class StageState:
    k: int
    t_k: int
    T_prev: int
    sampled_theta: np.ndarray
    visit_counts: dict = field(default_factory=dict)
    # counts as they stood at t_k, recorded lazily for pairs touched this stage
    snapshot_counts: dict = field(default_factory=dict)

    def record_visit(self, key):
        if key not in self.snapshot_counts:
            self.snapshot_counts[key] = self.visit_counts.get(key, 0)
        self.visit_counts[key] = self.visit_counts.get(key, 0) + 1

    def snapshot(self, key):
        return self.snapshot_counts.get(key, self.visit_counts.get(key, 0))


def stage_should_end(stage: StageState, t: int, current_sa=()) -> bool:
    """Stopping rule checked at the start of round ``t``.

    ``current_sa`` holds the keys incremented in round ``t - 1``; no other
    pair can have crossed its doubling threshold since then.
    """
    if t > stage.t_k + stage.T_prev:
        return True
    return any(stage.visit_counts.get(key, 0) > 2 * stage.snapshot(key) for key in current_sa)


class StateDiscretizer:
    """Quantises gains into bins and truncates backlog for visit counting.

    ``gain_bin_edges`` are increasing interior thresholds, either shared
    (1-D) or one row per device (2-D). ``len(edges) + 1`` bins result.
    """

    def __init__(self, gain_bin_edges=None, n_truncation: int = 256, *, gain_bins: int = 8,
                 gain_range=(1e-14, 1e-6)):
        if gain_bin_edges is None:
            gain_bin_edges = np.logspace(np.log10(gain_range[0]), np.log10(gain_range[1]), gain_bins - 1)
        edges = np.asarray(gain_bin_edges, dtype=float)
        if edges.shape[-1] and np.any(np.diff(edges, axis=-1) <= 0):
            raise ConfigError("scheduler.gain_bin_edges must be strictly increasing")
        self.edges = edges
        self.n_truncation = int(n_truncation)

    def gain_bins(self, gains):
        gains = np.asarray(gains, dtype=float)
        if self.edges.ndim == 1:
            return np.searchsorted(self.edges, gains, side="right")
        return np.array([np.searchsorted(e, g, side="right") for e, g in zip(self.edges, gains)])

    def n_levels(self, n):
        return np.clip(np.floor(np.asarray(n, dtype=float)), 0, self.n_truncation).astype(np.int64)

    def joint_key(self, gains, n, a):
        return (tuple(self.gain_bins(gains).tolist()), tuple(self.n_levels(n).tolist()),
                tuple(np.asarray(a, dtype=np.int8).tolist()))

    def factored_keys(self, gains, n, a):
        bins = self.gain_bins(gains).tolist()
        levels = self.n_levels(n).tolist()
        acts = np.asarray(a, dtype=np.int8).tolist()
        return [(u, b, lv, au) for u, (b, lv, au) in enumerate(zip(bins, levels, acts))]


class _PosteriorSampling(Scheduler):
    needs_backlog = False

    def __init__(self, prior="jeffreys", prior_shape=None, prior_rate=None, gain_bins=8,
                 gain_range=(1e-14, 1e-6), gain_bin_edges=None, counting_mode="auto",
                 epsilon_rate=DEFAULT_EPSILON_RATE, n_truncation=256, joint_max_devices=4):
        if prior == "jeffreys":
            self.prior_shape, self.prior_rate = JEFFREYS_SHAPE, 0.0
        elif prior == "gamma":
            if prior_shape is None or prior_rate is None or prior_shape <= 0 or prior_rate < 0:
                raise ConfigError("scheduler.prior gamma needs prior_shape > 0 and prior_rate >= 0")
            self.prior_shape, self.prior_rate = float(prior_shape), float(prior_rate)
        else:
            raise ConfigError(f"scheduler.prior must be 'jeffreys' or 'gamma', got {prior!r}")
        if counting_mode not in ("auto", "joint", "factored"):
            raise ConfigError(f"scheduler.counting_mode must be auto, joint or factored; got {counting_mode!r}")
        self.counting_mode = counting_mode
        self.joint_max_devices = joint_max_devices
        self.epsilon_rate = epsilon_rate
        self.discretizer = StateDiscretizer(gain_bin_edges, n_truncation, gain_bins=gain_bins,
                                            gain_range=gain_range)
        self._frozen = None

    def reset(self, num_devices, rng=None):
        super().reset(num_devices, rng)
        self.posterior = PosteriorState(num_devices, self.prior_shape, self.prior_rate, self.epsilon_rate)
        self.stage = None
        self.stage_starts = []
        self._last_keys = ()
        self._visit_counts = {}
        self.mode = self.counting_mode
        if self.mode == "auto":
            self.mode = "joint" if num_devices <= self.joint_max_devices else "factored"

    def freeze(self, theta):
        """Pin the sampled rates (posterior updates continue but are not used)."""
        self._frozen = np.asarray(theta, dtype=float)

    @property
    def num_stages(self):
        return len(self.stage_starts)

    def _maybe_new_stage(self, t):
        if self.stage is not None and not stage_should_end(self.stage, t, self._last_keys):
            return
        T_prev = 1 if self.stage is None else t - self.stage.t_k
        k = 1 if self.stage is None else self.stage.k + 1
        theta = self._frozen if self._frozen is not None else sample_theta(self.posterior, self.rng)
        self.stage = StageState(k=k, t_k=t, T_prev=T_prev, sampled_theta=theta,
                                visit_counts=self._visit_counts)
        self.stage_starts.append(t)

    def _count(self, gains, n, a):
        d = self.discretizer
        if self.mode == "joint":
            keys = (d.joint_key(gains, n, a),)
        else:
            keys = d.factored_keys(gains, n, a)
        for key in keys:
            self.stage.record_visit(key)
        self._last_keys = keys


class Balsa(_PosteriorSampling):
    """Posterior sampling with the reported backlog ``n`` observable."""

    name = "balsa"
    needs_backlog = True

    def reset(self, num_devices, rng=None):
        super().reset(num_devices, rng)
        self._prev_n = None
        self._prev_feedback = None

    def _absorb_arrivals(self, n_now):
        # m^{t-1}: delivered devices reported n+m, the rest grew their backlog by m
        if self._prev_n is None or self._prev_feedback is None:
            return
        fb = self._prev_feedback
        delivered = fb.a & fb.x
        m = np.where(delivered, fb.reports - self._prev_n, n_now - self._prev_n)
        self.posterior.update_all(np.maximum(m, 0), 1)

    def decide(self, state, success_probs, W):
        if state.n is None:
            raise MissingStateInfo("BALSA needs the per-device backlog n")
        n = np.asarray(state.n)
        self._absorb_arrivals(n)
        self._maybe_new_stage(state.round)
        a = top_w(greedy_scores(n, self.stage.sampled_theta, success_probs), W)
        self._count(state.gains, n, a)
        self._prev_n = n.copy()
        self._prev_feedback = None
        return ScheduleDecision(a)

    def observe(self, feedback: RoundFeedback):
        self._prev_feedback = feedback


class BalsaPO(_PosteriorSampling):
    """Posterior sampling when only channel gains are observed.

    Backlog is approximated by ``(T_n - 1) * theta`` with ``T_n`` the rounds
    since the device last delivered. A device's posterior only moves when it
    delivers, using the reported ``n + m`` over those ``T_n`` rounds.
    """

    name = "balsa-po"
    partial_observation = True

    def reset(self, num_devices, rng=None):
        super().reset(num_devices, rng)
        self.last_delivery = np.zeros(num_devices, dtype=np.int64)

    def rounds_since_delivery(self, t):
        return t - self.last_delivery

    def approx_backlog(self, t):
        return (self.rounds_since_delivery(t) - 1) * self.stage.sampled_theta

    def decide(self, state, success_probs, W):
        t = state.round
        self._maybe_new_stage(t)
        theta = self.stage.sampled_theta
        n_tilde = self.approx_backlog(t)
        a = top_w(greedy_scores(n_tilde, theta, success_probs), W)
        self._count(state.gains, n_tilde, a)
        return ScheduleDecision(a)

    def observe(self, feedback: RoundFeedback):
        delivered = np.flatnonzero(feedback.a & feedback.x)
        gaps = self.rounds_since_delivery(feedback.round)
        for u in delivered:
            self.posterior.update(int(u), int(feedback.reports[u]), int(gaps[u]))
        self.last_delivery[delivered] = feedback.round
