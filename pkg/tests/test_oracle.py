import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy import sparse
from scipy.stats import poisson

from wdlnsim.errors import NoConvergence, SingularChain, TooLarge
from wdlnsim.oracle import (BinnedChannel, SmallInstance, build_mdp, canonical_instance, evaluate_policy,
                            fading_bins, greedy_policy_table, random_policy_table, random_small_instance,
                            relative_value_iteration, solve, state_count, stationary_distribution)


def tiny(**kw):
    base = dict(distances_km=(0.2, 0.35), rates=(0.8, 1.5), W=1, gain_bins=2, n_max=2, m_max=2)
    base.update(kw)
    return SmallInstance(**base)


def brute_force_kernel(model):
    """Dense transition tensor enumerated outcome by outcome."""
    inst = model.instance
    U, B, L = inst.U, inst.gain_bins, inst.n_max + 1
    pm = []
    for r in inst.rates:
        d = poisson.pmf(np.arange(inst.m_max + 1), r)
        d[-1] = 1.0 - d[:-1].sum()
        pm.append(d)
    states = list(itertools.product(*([range(B)] * U), *([range(L)] * U)))
    index = {s: i for i, s in enumerate(states)}
    P = np.zeros((len(states), model.num_actions, len(states)))
    for s in states:
        bins, n = s[:U], s[U:]
        for k, act in enumerate(model.actions):
            for ms in itertools.product(range(inst.m_max + 1), repeat=U):
                pr_m = np.prod([pm[u][ms[u]] for u in range(U)])
                for xs in itertools.product((0, 1), repeat=U):
                    pr_x = 1.0
                    for u in range(U):
                        if u in act:
                            p = model.success[u, bins[u]]
                            pr_x *= p if xs[u] else 1 - p
                        elif xs[u]:
                            pr_x = 0.0
                    if pr_x == 0.0:
                        continue
                    nxt_n = tuple(0 if xs[u] else min(n[u] + ms[u], inst.n_max) for u in range(U))
                    for nb in itertools.product(range(B), repeat=U):
                        P[index[s], k, index[nb + nxt_n]] += pr_m * pr_x / B ** U
    return P


class TestFadingBins:
    def test_equal_probability(self):
        cuts, reps = fading_bins(3)
        np.testing.assert_allclose(np.exp(-cuts), [2 / 3, 1 / 3])
        # conditional means average back to the unit mean
        assert reps.mean() == pytest.approx(1.0)
        assert np.all(np.diff(reps) > 0)

    def test_single_bin(self):
        cuts, reps = fading_bins(1)
        assert cuts.size == 0 and reps[0] == pytest.approx(1.0)


class TestBuildMdp:
    def test_degenerate_single_state(self):
        inst = SmallInstance(distances_km=(0.2,), rates=(1.0,), W=1, gain_bins=1, n_max=0, m_max=2)
        model = build_mdp(inst)
        assert model.num_states == 1 and model.num_actions == 1
        sol = relative_value_iteration(model)
        assert sol.J_star == pytest.approx(model.rewards[0, 0], abs=1e-12)
        F = model.unnormalize(model.rewards[0, 0])
        p = model.success[0, 0]
        mean_m = model.arrival_means[0]
        assert F == pytest.approx(p * mean_m - 0.01 * (1 - p) * mean_m, rel=1e-12)

    def test_rows_stochastic_and_rewards_normalised(self):
        model = build_mdp(tiny(gain_bins=3, n_max=4))
        for P in model.transitions:
            np.testing.assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-9)
        assert model.rewards.min() >= 0 and model.rewards.max() <= 1

    def test_matches_brute_force(self):
        model = build_mdp(tiny())
        np.testing.assert_allclose(model.dense_transitions(), brute_force_kernel(model), atol=1e-14)

    def test_unscheduled_marginal_is_shifted_poisson(self):
        inst = tiny(n_max=4)
        model = build_mdp(inst)
        dense = model.dense_transitions()
        pmf = poisson.pmf(np.arange(3), inst.rates[1])
        pmf[-1] = 1 - pmf[:-1].sum()
        k = model.actions.index((0,))
        for s, st_ in enumerate(model.states):
            n1 = st_[3]
            marg = np.zeros(inst.n_max + 1)
            for s2, st2 in enumerate(model.states):
                marg[st2[3]] += dense[s, k, s2]
            expected = np.zeros(inst.n_max + 1)
            for m, p in enumerate(pmf):
                expected[min(n1 + m, inst.n_max)] += p
            np.testing.assert_allclose(marg, expected, atol=1e-12)

    @pytest.mark.parametrize("kw", [dict(distances_km=(0.1,) * 4, rates=(1.0,) * 4), dict(gain_bins=4),
                                    dict(n_max=5), dict(m_max=3)])
    def test_guard(self, kw):
        with pytest.raises(TooLarge):
            build_mdp(tiny(**kw))

    def test_state_count_exponential(self):
        counts = [state_count(U, 3, 4) for U in (1, 2, 3, 4)]
        assert counts == [15, 225, 3375, 50625]
        assert build_mdp(tiny(distances_km=(0.1, 0.2, 0.3), rates=(1.0, 1.0, 1.0), gain_bins=2,
                              n_max=1, m_max=1)).num_states == state_count(3, 2, 1)


class TestValueIteration:
    def test_single_state_one_iteration(self):
        model = build_mdp(tiny(gain_bins=1, n_max=0, m_max=0))
        sol = relative_value_iteration(model)
        assert sol.iterations == 1
        assert sol.J_star == pytest.approx(model.rewards[0].max())

    def test_action_independent_reward(self):
        model = build_mdp(tiny())
        model.rewards[:] = model.rewards[:, [0]]
        model.transitions = [model.transitions[0]] * model.num_actions
        sol = relative_value_iteration(model)
        rng = np.random.default_rng(0)
        for _ in range(3):
            assert evaluate_policy(model, random_policy_table(model, rng)) == pytest.approx(sol.J_star, abs=1e-8)

    def test_optimal_policy_value(self):
        model, sol, _ = solve(tiny(gain_bins=3, n_max=4))
        assert evaluate_policy(model, sol.policy) == pytest.approx(sol.J_star, abs=1e-8)
        assert sol.residual < 1e-8
        assert sol.v[0] == 0.0

    def test_random_policies_bounded(self):
        model, sol, _ = solve(tiny(n_max=3))
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert evaluate_policy(model, random_policy_table(model, rng)) <= sol.J_star + 1e-9

    def test_no_convergence(self):
        with pytest.raises(NoConvergence):
            relative_value_iteration(build_mdp(tiny(n_max=4)), tol=1e-12, max_iter=2)

    def test_normalisation_invariance(self):
        model, sol, _ = solve(tiny(n_max=3))
        model.rewards = model.unnormalize(model.rewards)
        raw = relative_value_iteration(model, tol=1e-9 * model.F_scale)
        assert raw.J_star == pytest.approx(float(model.unnormalize(sol.J_star)), abs=1e-8 * model.F_scale)

    def test_gamma_monotone(self):
        rng = np.random.default_rng(4)
        for _ in range(3):
            base = random_small_instance(rng)
            Js = []
            for g in (0.0, 0.01, 0.1, 0.5):
                inst = SmallInstance(**{**base.__dict__, "gamma": g})
                model, sol, _ = solve(inst)
                Js.append(float(model.unnormalize(sol.J_star)))
            assert all(b <= a + 1e-8 for a, b in zip(Js, Js[1:]))


class TestGreedyAgainstOracle:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_seeded_instances(self, seed):
        _, _, rep = solve(random_small_instance(np.random.default_rng(seed)))
        assert rep.J_greedy >= rep.J_star - 1e-6

    @settings(max_examples=40, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
    @given(st.integers(0, 10_000))
    def test_greedy_optimal_on_every_instance(self, seed):
        _, _, rep = solve(random_small_instance(np.random.default_rng(seed)))
        assert abs(rep.J_star - rep.J_greedy) <= 1e-6


class TestChains:
    def test_two_closed_classes(self):
        with pytest.raises(SingularChain):
            stationary_distribution(sparse.identity(3, format="csr"))

    def test_stationary_of_two_state_chain(self):
        P = sparse.csr_matrix(np.array([[0.9, 0.1], [0.5, 0.5]]))
        np.testing.assert_allclose(stationary_distribution(P), [5 / 6, 1 / 6], atol=1e-12)


class TestBinnedChannel:
    def test_probabilities_match_model(self):
        model = build_mdp(tiny(gain_bins=3))
        ch = BinnedChannel(model)
        rng = np.random.default_rng(0)
        for _ in range(50):
            f = rng.exponential(size=2)
            b = ch.bins(f)
            np.testing.assert_allclose(ch.success_probs(ch.gains(f)), model.success[[0, 1], b])

    def test_canonical_instance_is_small(self):
        inst = canonical_instance()
        assert inst.U == 2 and inst.gain_bins <= 3 and inst.n_max <= 4
