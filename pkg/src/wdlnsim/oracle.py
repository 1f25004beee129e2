"""Exact average-reward MDP for tiny instances.

The state is the joint (gain bin, truncated backlog) of every device and an
action is a ``W``-subset of devices. Gains are redrawn i.i.d. each round from
equal-probability bins of the unit-mean exponential fading law, so any
stationary policy induces a unichain. Rewards are the expected effectivity
score shifted and scaled into ``[0, 1]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve
from scipy.stats import poisson

from .bayes import StateDiscretizer
from .channel import ChannelBank, make_ber_model
from .errors import ConfigError, NoConvergence, SingularChain, TooLarge
from .schedulers import top_w

MAX_DEVICES = 3
MAX_GAIN_BINS = 3
MAX_N = 4
MAX_M = 2


@dataclass(frozen=True)
class SmallInstance:
    """Parameters of a toy instance the oracle can solve exactly."""

    distances_km: tuple
    rates: tuple
    W: int = 1
    gain_bins: int = 2
    n_max: int = 4
    m_max: int = 2
    gamma: float = 0.01
    packet_bits: int = 4096
    tx_power_dbm: float = 23.0
    noise_power_dbm: float = -96.0
    ber_model: str = "bpsk_uncoded"

    def __post_init__(self):
        if len(self.distances_km) != len(self.rates):
            raise ConfigError("devices: distances and rates differ in length")
        if not 1 <= self.W <= len(self.rates):
            raise ConfigError(f"experiment.W must lie in [1, {len(self.rates)}], got {self.W!r}")
        if self.gain_bins < 1 or self.n_max < 0 or self.m_max < 0:
            raise ConfigError("oracle sizes must be nonnegative (gain_bins >= 1)")
        if any(r <= 0 for r in self.rates):
            raise ConfigError("devices.rate must be > 0")
        if self.gamma < 0:
            raise ConfigError("experiment.gamma must be >= 0")

    @property
    def U(self):
        return len(self.rates)

    def channel(self) -> ChannelBank:
        return ChannelBank(self.distances_km, self.tx_power_dbm, self.noise_power_dbm,
                           self.packet_bits, make_ber_model(self.ber_model))


def check_tractable(inst: SmallInstance):
    limits = [("devices", inst.U, MAX_DEVICES), ("gain bins", inst.gain_bins, MAX_GAIN_BINS),
              ("n_max", inst.n_max, MAX_N), ("m_max", inst.m_max, MAX_M)]
    for what, value, cap in limits:
        if value > cap:
            raise TooLarge(f"{what}={value} exceeds the exact-oracle limit {cap}")


def state_count(U: int, gain_bins: int, n_max: int) -> int:
    """``(gain_bins * (n_max + 1)) ** U``: exponential in the number of devices."""
    return (gain_bins * (n_max + 1)) ** U


def fading_bins(B: int):
    """Equal-probability bins of Exp(1).

    Returns ``(interior_edges, representatives)`` where each representative is
    the conditional mean of the fading within its bin.
    """
    cuts = -np.log1p(-np.arange(1, B) / B)
    lo = np.concatenate([[0.0], cuts])
    hi = np.concatenate([cuts, [np.inf]])
    reps = np.empty(B)
    for i, (a, b) in enumerate(zip(lo, hi)):
        ea = math.exp(-a)
        eb = 0.0 if math.isinf(b) else math.exp(-b)
        tail_b = 0.0 if math.isinf(b) else b * eb
        # E[g | a <= g < b] for unit-rate exponential
        reps[i] = (a * ea - tail_b + ea - eb) / (ea - eb)
    return cuts, reps


def truncated_poisson_pmf(rate: float, m_max: int) -> np.ndarray:
    """Law of ``min(Poisson(rate), m_max)``."""
    pmf = poisson.pmf(np.arange(m_max + 1), rate)
    pmf[-1] = poisson.sf(m_max - 1, rate) if m_max > 0 else 1.0
    return pmf


@dataclass
class MdpModel:
    """Finite MDP with one sparse ``S x S`` transition matrix per action."""

    instance: SmallInstance
    states: np.ndarray        # S x 2U: gain bins then backlog levels
    actions: list             # tuples of scheduled device indices
    transitions: list         # per action, CSR matrix
    rewards: np.ndarray       # S x A, normalized into [0, 1]
    success: np.ndarray       # U x B success probability per bin
    bin_probs: np.ndarray     # U x B
    gain_reps: np.ndarray     # U x B representative linear gains
    gain_edges: np.ndarray    # U x (B - 1) interior gain thresholds
    arrival_means: np.ndarray
    F_offset: float
    F_scale: float

    @property
    def num_states(self):
        return len(self.states)

    @property
    def num_actions(self):
        return len(self.actions)

    def state_index(self, bins, n) -> int:
        inst = self.instance
        B, L = inst.gain_bins, inst.n_max + 1
        idx = 0
        for b in bins:
            idx = idx * B + int(b)
        for lv in n:
            idx = idx * L + min(int(lv), inst.n_max)
        return idx

    def action_index(self, a) -> int:
        return self._action_lookup[tuple(int(u) for u in np.flatnonzero(a))]

    def action_mask(self, k) -> np.ndarray:
        mask = np.zeros(self.instance.U, dtype=bool)
        mask[list(self.actions[k])] = True
        return mask

    def unnormalize(self, r):
        return np.asarray(r) * self.F_scale - self.F_offset

    def dense_transitions(self) -> np.ndarray:
        """``S x A x S`` array; only sensible for the smallest models."""
        return np.stack([P.toarray() for P in self.transitions], axis=1)

    def discretizer(self) -> StateDiscretizer:
        """Discretizer whose bins coincide with this model's gain bins."""
        return StateDiscretizer(self.gain_edges, n_truncation=self.instance.n_max)

    def __post_init__(self):
        self._action_lookup = {a: k for k, a in enumerate(self.actions)}


def build_mdp(inst: SmallInstance) -> MdpModel:
    """Exact model of the instance; raises :class:`TooLarge` past the guard."""
    check_tractable(inst)
    U, B, n_max, m_max = inst.U, inst.gain_bins, inst.n_max, inst.m_max
    L = n_max + 1
    bank = inst.channel()
    cuts, reps = fading_bins(B)
    gain_reps = bank.mean_gains[:, None] * reps[None, :]
    success = np.stack([bank.success_probs(np.full(U, 0.0) + gain_reps[:, b]) for b in range(B)], axis=1)
    bin_probs = np.full((U, B), 1.0 / B)
    gain_edges = bank.mean_gains[:, None] * cuts[None, :]
    pm = [truncated_poisson_pmf(r, m_max) for r in inst.rates]
    arrival_means = np.array([np.dot(np.arange(m_max + 1), p) for p in pm])

    # kernel[u][b, n, scheduled] is the law of next backlog for device u
    kernel = np.zeros((U, B, L, 2, L))
    for u in range(U):
        for n in range(L):
            for m, pr in enumerate(pm[u]):
                nxt = min(n + m, n_max)
                kernel[u, :, n, 0, nxt] += pr
                kernel[u, :, n, 1, 0] += pr * success[u]
                kernel[u, :, n, 1, nxt] += pr * (1.0 - success[u])

    actions = list(itertools.combinations(range(U), inst.W))
    grid = [range(B)] * U + [range(L)] * U
    states = np.array(list(itertools.product(*grid)), dtype=np.int64).reshape(-1, 2 * U)
    S, A = len(states), len(actions)

    F_offset = inst.gamma * U * (n_max + m_max)
    F_scale = (1.0 + inst.gamma) * U * (n_max + m_max)
    if F_scale == 0:
        F_scale = 1.0

    gain_law = bin_probs[0]
    for u in range(1, U):
        gain_law = np.kron(gain_law, bin_probs[u])

    rewards = np.zeros((S, A))
    rows = [[] for _ in range(A)]
    cols = [[] for _ in range(A)]
    vals = [[] for _ in range(A)]
    for s, st in enumerate(states):
        bins, ns = st[:U], st[U:]
        mass = ns + arrival_means
        for k, act in enumerate(actions):
            sched = np.zeros(U, dtype=bool)
            sched[list(act)] = True
            ps = np.where(sched, success[np.arange(U), bins], 0.0)
            F = float(np.sum(ps * (1.0 + inst.gamma) * mass) - inst.gamma * mass.sum())
            rewards[s, k] = (F + F_offset) / F_scale
            row = gain_law
            for u in range(U):
                row = np.kron(row, kernel[u, bins[u], ns[u], int(sched[u])])
            nz = np.flatnonzero(row)
            rows[k].append(np.full(len(nz), s))
            cols[k].append(nz)
            vals[k].append(row[nz])
    transitions = [sparse.csr_matrix((np.concatenate(vals[k]), (np.concatenate(rows[k]), np.concatenate(cols[k]))),
                                     shape=(S, S)) for k in range(A)]
    return MdpModel(inst, states, actions, transitions, rewards, success, bin_probs, gain_reps,
                    gain_edges, arrival_means, F_offset, F_scale)


@dataclass(frozen=True)
class ValueSolution:
    J_star: float
    v: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float


def _q_values(model: MdpModel, v):
    return model.rewards + np.stack([P @ v for P in model.transitions], axis=1)


def relative_value_iteration(model: MdpModel, tol: float = 1e-9, max_iter: int = 100_000) -> ValueSolution:
    """Span-seminorm stopping; ``v`` is pinned to zero at state 0."""
    v = np.zeros(model.num_states)
    for it in range(1, max_iter + 1):
        Q = _q_values(model, v)
        nv = Q.max(axis=1)
        diff = nv - v
        span = float(diff.max() - diff.min())
        if span < tol:
            J = 0.5 * float(diff.max() + diff.min())
            v_rel = nv - nv[0]
            Q = _q_values(model, v_rel)
            policy = np.argmax(Q, axis=1)
            residual = float(np.max(np.abs(J + v_rel - Q.max(axis=1))))
            return ValueSolution(J, v_rel, policy, it, residual)
        v = nv - nv[0]
    raise NoConvergence(f"relative value iteration did not reach span {tol} in {max_iter} iterations")


def policy_matrix(model: MdpModel, policy):
    policy = np.asarray(policy)
    if policy.shape != (model.num_states,):
        raise ValueError("policy must give one action index per state")
    S = model.num_states
    rows = []
    for k, P in enumerate(model.transitions):
        pick = sparse.diags((policy == k).astype(float), shape=(S, S))
        rows.append(pick @ P)
    return sum(rows[1:], rows[0]).tocsr()


def stationary_distribution(P):
    """Stationary law of a unichain given as a sparse stochastic matrix."""
    S = P.shape[0]
    _, labels = connected_components(P, directed=True, connection="strong")
    # a class is closed when no edge leaves it
    coo = P.tocoo()
    leaving = np.zeros(labels.max() + 1, dtype=bool)
    out = labels[coo.row] != labels[coo.col]
    leaving[labels[coo.row[out & (coo.data > 0)]]] = True
    if int((~leaving).sum()) != 1:
        raise SingularChain(f"induced chain has {int((~leaving).sum())} closed classes")
    A = (P.T - sparse.identity(S, format="csr")).tolil()
    A[S - 1, :] = np.ones(S)
    b = np.zeros(S)
    b[-1] = 1.0
    pi = spsolve(A.tocsc(), b)
    pi = np.maximum(pi, 0.0)
    return pi / pi.sum()


def evaluate_policy(model: MdpModel, policy) -> float:
    """Long-run average normalized reward of a stationary deterministic policy."""
    policy = np.asarray(policy)
    pi = stationary_distribution(policy_matrix(model, policy))
    r = model.rewards[np.arange(model.num_states), policy]
    return float(pi @ r)


def greedy_policy_table(model: MdpModel, theta=None) -> np.ndarray:
    """Greedy action per state with bin-representative success probabilities.

    ``theta`` defaults to the mean truncated arrival count, which makes the
    greedy score the myopic expected delivered mass.
    """
    inst = model.instance
    U = inst.U
    theta = model.arrival_means if theta is None else np.asarray(theta, dtype=float)
    out = np.empty(model.num_states, dtype=np.int64)
    for s, st in enumerate(model.states):
        p = model.success[np.arange(U), st[:U]]
        a = top_w(p * (st[U:] + theta), inst.W)
        out[s] = model.action_index(a)
    return out


def random_policy_table(model: MdpModel, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(model.num_actions, size=model.num_states)


def random_small_instance(rng: np.random.Generator, U: int = 2) -> SmallInstance:
    """Physically generated toy: distances in 100..500 m, rates in 0.2..2."""
    return SmallInstance(
        distances_km=tuple(float(x) for x in rng.uniform(0.1, 0.5, size=U)),
        rates=tuple(float(x) for x in rng.uniform(0.2, 2.0, size=U)),
        W=1,
        gain_bins=int(rng.integers(2, 4)),
        n_max=int(rng.integers(2, 5)),
        m_max=2,
    )


@dataclass(frozen=True)
class OracleReport:
    J_star: float
    J_greedy: float
    iterations: int
    residual: float

    @property
    def greedy_gap(self):
        return self.J_star - self.J_greedy


def solve(inst: SmallInstance, tol: float = 1e-9, max_iter: int = 100_000):
    """Build, solve and compare against greedy; returns ``(model, solution, report)``."""
    model = build_mdp(inst)
    sol = relative_value_iteration(model, tol, max_iter)
    J_greedy = evaluate_policy(model, greedy_policy_table(model))
    return model, sol, OracleReport(sol.J_star, J_greedy, sol.iterations, sol.residual)


class BinnedChannel:
    """Channel whose gains snap to the oracle's bin representatives.

    Plugging this into the round engine makes a simulation follow the
    oracle model exactly, which is what exact regret needs.
    """

    def __init__(self, model: MdpModel):
        self.model = model
        self.cuts, self.reps = fading_bins(model.instance.gain_bins)
        self.mean_gains = model.instance.channel().mean_gains

    def __len__(self):
        return self.model.instance.U

    def bins(self, fading):
        return np.searchsorted(self.cuts, fading, side="right")

    def gains(self, fading):
        return self.mean_gains * self.reps[self.bins(fading)]

    def success_probs(self, gains):
        b = np.array([np.searchsorted(e, g, side="right") for e, g in zip(self.model.gain_edges, gains)])
        return self.model.success[np.arange(len(b)), b]


def canonical_instance() -> SmallInstance:
    """The two-device instance used for exact regret: the first seeded toy."""
    return random_small_instance(np.random.default_rng(0))


def expected_reward_trace(model: MdpModel, scheduler, rounds: int, seed: int, instance: int = 0):
    """Run ``scheduler`` on the binned engine; returns per-round ``r(s_t, a_t)``.

    Using the model's expected reward rather than the realised score removes
    the delivery noise from regret estimates without biasing them.
    """
    from .engine import Environment, FlHyperParams, World, run_round
    from .rng import GLOBAL, stream

    inst = model.instance
    env = Environment(inst.rates, seed, instance, m_max=inst.m_max)
    channel = BinnedChannel(model)
    world = World(channel, inst.rates, inst.W, gamma=inst.gamma, hyper=FlHyperParams(n_max=inst.n_max), env=env)
    scheduler.reset(inst.U, stream(seed, instance, GLOBAL, "scheduler"))
    out = np.empty(rounds)
    for t in range(rounds):
        fading, _, _ = env.draws(t + 1)
        s = model.state_index(channel.bins(fading), world.n)
        rec = run_round(world, scheduler)
        out[t] = model.rewards[s, model.action_index(rec.a)]
    return out
