import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ddql.envs import make_env, to_tabular
from ddql.evaluation import (
    ScorePanel,
    Trajectory,
    auc_mean,
    compute_overestimation,
    discounted_returns,
    iqm,
    normalized_score_metrics,
    point_statistic,
    run_evaluation_phase,
    stratified_bootstrap_ci,
)
from ddql.tabular import policy_q_evaluation
from oracles import PinnedPolicy, brute_iqm, brute_metrics, cluster_se, toward_goal_policy

finite = st.floats(-100, 100, allow_nan=False)


class TestDiscountedReturns:
    def test_examples(self):
        assert discounted_returns([1.0], 0.9).tolist() == [1.0]
        assert discounted_returns([0.0, 1.0], 0.5).tolist() == [0.5, 1.0]
        assert discounted_returns([0.0], 0.9, bootstrap_value=2.0)[0] == pytest.approx(1.8)

    def test_bootstrap_rules(self):
        with pytest.raises(ValueError):
            discounted_returns([1.0], 0.9, bootstrap_value=1.0, truncated=False)
        with pytest.raises(ValueError):
            discounted_returns([1.0], 0.9, truncated=True)

    @given(st.lists(finite, min_size=1, max_size=30), st.floats(0, 0.99), finite)
    def test_matches_direct_sum(self, rewards, gamma, boot):
        got = discounted_returns(rewards, gamma, bootstrap_value=boot)
        T = len(rewards)
        for t in range(T):
            want = sum(gamma ** (j - t) * rewards[j] for j in range(t, T)) + gamma ** (T - t) * boot
            assert got[t] == pytest.approx(want, rel=1e-9, abs=1e-9)


class TestOverestimation:
    def test_constant_gap(self):
        traj = Trajectory(np.array([0.8, 0.8]), np.array([1.0, 1.0]))
        assert compute_overestimation([traj], 0.0)[2] == pytest.approx(0.2)

    def test_single_step(self):
        traj = Trajectory(np.array([1.0]), np.array([0.5]))
        assert compute_overestimation([traj], 0.99) == (0.5, 1.0, -0.5)

    def test_averaged_heads(self):
        trajs = [Trajectory(np.zeros(3), np.full(3, 0.5 * (0.0 + 2.0)))]
        assert compute_overestimation(trajs, 0.9)[2] == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_overestimation([], 0.9)

    def test_misaligned_predictions(self):
        with pytest.raises(ValueError):
            compute_overestimation([Trajectory(np.zeros(3), np.zeros(3))], 0.9, [np.zeros(2)])

    @given(st.lists(st.tuples(st.integers(1, 5), st.booleans()), min_size=1, max_size=6),
           st.integers(0, 10**6))
    def test_difference_is_exact(self, shapes, seed):
        rng = np.random.default_rng(seed)
        trajs = [Trajectory(rng.normal(size=n), rng.normal(size=n), tr, rng.normal() if tr else None)
                 for n, tr in shapes]
        q, g, d = compute_overestimation(trajs, 0.9)
        assert d == q - g


class FixedAgent:
    def __init__(self, q=0.0):
        self.q = q

    def act(self, obs, epsilon, rng):
        return 1, self.q

    def bootstrap_value(self, obs):
        return 10.0


class TestEvaluationPhase:
    def test_discards_unfinished_episode(self):
        env = make_env("gridworld", width=3, height=1, slip_prob=0.0, goal_noise_std=0.0,
                       step_reward=0.0)
        rep = run_evaluation_phase(FixedAgent(), env, 0.0, 5, np.random.default_rng(0), 0.9)
        # two-step episodes: two complete, the fifth step is dropped
        assert rep.n_state_action_pairs == 4
        assert rep.completed_episode_returns.tolist() == [1.0, 1.0]
        assert rep.overestimation == rep.mean_predicted_q - rep.mean_empirical_return

    def test_truncation_bootstraps(self):
        env = make_env("gridworld", max_steps=2, width=5, height=1, slip_prob=0.0, step_reward=0.0)
        rep = run_evaluation_phase(FixedAgent(), env, 0.0, 4, np.random.default_rng(0), 0.5)
        assert rep.n_truncation_bootstraps == 2
        assert rep.mean_empirical_return == pytest.approx(np.mean([5.0, 2.5]))

    def test_empty_phase(self):
        env = make_env("gridworld", width=5, height=5, slip_prob=0.0)
        rep = run_evaluation_phase(FixedAgent(), env, 0.0, 3, np.random.default_rng(0), 0.9)
        assert rep.is_empty and np.isnan(rep.overestimation) and np.isnan(rep.mean_return)

    def test_deterministic(self):
        env = make_env("gridworld", max_steps=20, width=3, height=3, slip_prob=0.0, goal_noise_std=0.0)
        a = run_evaluation_phase(FixedAgent(0.3), env, 0.0, 100, np.random.default_rng(0), 0.9)
        b = run_evaluation_phase(FixedAgent(0.3), env, 0.0, 100, np.random.default_rng(0), 0.9)
        assert a.overestimation == b.overestimation
        assert a.completed_episode_returns.tolist() == b.completed_episode_returns.tolist()

    def test_bad_length(self):
        with pytest.raises((TypeError, ValueError)):
            run_evaluation_phase(FixedAgent(), make_env("maxbias"), 0.0, 0, None, 0.9)

    def test_pinned_oracle_is_unbiased(self):
        env = make_env("gridworld", max_steps=30, step_noise_std=0.3)
        mdp = to_tabular(env, gamma=0.9)
        pi = toward_goal_policy(5, 5)
        q = policy_q_evaluation(mdp, pi)
        rep = run_evaluation_phase(PinnedPolicy(pi, q), env, 0.0, 10_000, np.random.default_rng(1), 0.9)
        assert rep.n_truncation_bootstraps > 0
        assert abs(rep.overestimation) <= 3 * cluster_se(rep, 0.9)


class TestPanel:
    def test_normalization_examples(self):
        panel = ScorePanel({"g": [50.0, 0.0]}, {"g": (0.0, 100.0)})
        assert panel.normalized()["g"].tolist() == [0.5, 0.0]

    def test_human_equals_random(self):
        with pytest.raises(ValueError):
            ScorePanel({"g": [1.0]}, {"g": (3.0, 3.0)})

    def test_missing_baseline(self):
        with pytest.raises(ValueError):
            ScorePanel({"g": [1.0], "h": [2.0]}, {"g": (0.0, 1.0)})
        with pytest.raises(ValueError):
            ScorePanel({"g": [1.0]}).normalized()

    def test_iqm_example(self):
        assert iqm([1, 2, 3, 4]) == 2.5
        assert normalized_score_metrics(ScorePanel({"a": [1, 2], "b": [3, 4]}), normalize=False).iqm == 2.5

    def test_single_env_mean_is_seed_mean(self):
        panel = ScorePanel({"g": [10.0, 30.0, 80.0]}, {"g": (10.0, 110.0)})
        assert point_statistic(panel, "mean") == pytest.approx(np.mean([0.0, 0.2, 0.7]))

    @settings(max_examples=50)
    @given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 7))
    def test_matches_brute_force(self, seed, n_env, n_seed):
        rng = np.random.default_rng(seed)
        scores = {f"e{i}": rng.normal(size=n_seed) * 100 for i in range(n_env)}
        base = {e: tuple(sorted(rng.normal(size=2) * 50)) for e in scores}
        m = normalized_score_metrics(ScorePanel(scores, base))
        for got, want in zip((m.mean, m.median, m.iqm), brute_metrics(scores, base)):
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    @given(hnp.arrays(np.float64, st.integers(1, 40), elements=finite), finite, st.integers(0, 10**6))
    def test_iqm_permutation_and_shift(self, x, c, seed):
        perm = np.random.default_rng(seed).permutation(x)
        assert iqm(perm) == pytest.approx(iqm(x), rel=1e-12, abs=1e-9)
        assert iqm(x + c) == pytest.approx(iqm(x) + c, rel=1e-9, abs=1e-9)
        assert brute_iqm(x) == pytest.approx(iqm(x), rel=1e-12, abs=1e-9)

    @given(hnp.arrays(np.float64, st.integers(1, 40), elements=finite),
           st.floats(0, 50, allow_nan=False))
    def test_iqm_monotone(self, x, c):
        assert iqm(x + c) >= iqm(x) - 1e-9


class TestBootstrap:
    def test_constant_panel(self):
        panel = ScorePanel({"a": [2.0] * 4, "b": [2.0] * 3})
        for stat in ("mean", "median", "iqm"):
            assert stratified_bootstrap_ci(panel, stat, 1000, rng=0) == (2.0, 2.0)

    @pytest.mark.parametrize("stat", ["mean", "median", "iqm"])
    def test_contains_point(self, stat):
        rng = np.random.default_rng(0)
        panel = ScorePanel({f"e{i}": rng.normal(size=5) for i in range(6)})
        lo, hi = stratified_bootstrap_ci(panel, stat, 2000, rng=1)
        assert lo <= point_statistic(panel, stat) <= hi

    def test_needs_two_seeds(self):
        with pytest.raises(ValueError):
            stratified_bootstrap_ci(ScorePanel({"a": [1.0, 2.0], "b": [1.0]}))

    def test_seeds_resampled_within_strata(self):
        # stratum "a" holds 0s and "b" holds 1s; any resample mean is exactly 0.5
        panel = ScorePanel({"a": [0.0, 0.0, 0.0], "b": [1.0, 1.0, 1.0]})
        assert stratified_bootstrap_ci(panel, "mean", 1000, rng=0) == (0.5, 0.5)

    def test_seeded(self):
        panel = ScorePanel({"a": [0.1, 0.5, 0.9], "b": [1.0, 2.0, 4.0]})
        assert stratified_bootstrap_ci(panel, rng=3) == stratified_bootstrap_ci(panel, rng=3)

    def test_small_coverage(self):
        rng = np.random.default_rng(2)
        hits = 0
        for _ in range(100):
            panel = ScorePanel({f"e{i}": rng.normal(1.0, 1.0, size=10) for i in range(5)})
            lo, hi = stratified_bootstrap_ci(panel, "mean", 1000, rng=rng)
            hits += lo <= 1.0 <= hi
        assert 80 <= hits <= 100


class TestAuc:
    def test_examples(self):
        assert auc_mean([[3.0] * 4, [3.0] * 4]) == 3.0
        assert auc_mean([[0.0, 1.0]]) == 0.5

    def test_uniform_clt(self):
        curves = np.random.default_rng(0).uniform(size=(5, 200))
        assert abs(auc_mean(curves) - 0.5) <= 0.05

    def test_ragged(self):
        with pytest.raises(ValueError):
            auc_mean([[1.0, 2.0], [1.0]])
