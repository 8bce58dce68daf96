import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddql.envs import (
    EpisodeOverError,
    MaxBiasChain,
    RewardClipWrapper,
    StickyActionWrapper,
    StochasticGridworld,
    TimeLimitWrapper,
    make_env,
    to_tabular,
)


def rollout(env, actions, rng):
    env.reset(rng)
    out = []
    for a in actions:
        step = env.step(a, rng)
        out.append(step)
        if step[2] or step[3]:
            break
    return out


class TestContract:
    def test_step_after_end_raises(self):
        env = MaxBiasChain()
        rng = np.random.default_rng(0)
        env.reset(rng)
        env.step(1, rng)
        with pytest.raises(EpisodeOverError):
            env.step(0, rng)

    def test_step_before_reset_raises(self):
        with pytest.raises(EpisodeOverError):
            StochasticGridworld().step(0, np.random.default_rng(0))

    def test_action_range(self):
        env = StochasticGridworld()
        env.reset(np.random.default_rng(0))
        with pytest.raises(IndexError):
            env.step(4, np.random.default_rng(0))

    @pytest.mark.parametrize("name", ["maxbias", "gridworld"])
    def test_seeded_reproducible(self, name):
        actions = np.random.default_rng(9).integers(0, 4, size=200)
        a = rollout(make_env(name, max_steps=50), actions, np.random.default_rng(3))
        b = rollout(make_env(name, max_steps=50), actions, np.random.default_rng(3))
        assert [s[1:] for s in a] == [s[1:] for s in b]

    def test_unknown_env(self):
        with pytest.raises(ValueError):
            make_env("pong")


class TestMaxBiasChain:
    def test_right_ends_with_zero(self):
        env = MaxBiasChain()
        rng = np.random.default_rng(0)
        env.reset(rng)
        obs, r, terminal, truncated = env.step(MaxBiasChain.RIGHT, rng)
        assert (r, terminal, truncated) == (0.0, True, False)
        assert env.state_index() == MaxBiasChain.TERMINAL

    def test_left_then_arm_reward_distribution(self):
        env = MaxBiasChain(arm_mean=-0.1, arm_std=1.0)
        rng = np.random.default_rng(1)
        rewards = []
        for _ in range(20_000):
            env.reset(rng)
            _, r0, t0, _ = env.step(MaxBiasChain.LEFT, rng)
            assert r0 == 0.0 and not t0
            rewards.append(env.step(3, rng)[1])
        assert np.mean(rewards) == pytest.approx(-0.1, abs=4 * 1.0 / np.sqrt(20_000))
        assert np.std(rewards) == pytest.approx(1.0, rel=0.03)

    def test_needs_two_arms(self):
        with pytest.raises(ValueError):
            MaxBiasChain(n_arms=1)

    def test_tabular_masks_extra_actions_at_a(self):
        mdp = to_tabular(MaxBiasChain(n_arms=5))
        assert mdp.action_mask[0].tolist() == [True, True, False, False, False]
        assert mdp.action_mask[1].all()


class TestGridworld:
    def test_deterministic_path_to_goal(self):
        env = StochasticGridworld(3, 3, step_reward=-0.1, goal_noise_std=0.0, slip_prob=0.0)
        steps = rollout(env, [1, 1, 2, 2], np.random.default_rng(0))
        assert [s[1] for s in steps] == pytest.approx([-0.1, -0.1, -0.1, 0.9])
        assert steps[-1][2] and env.state_index() == 8

    def test_wall_bump_stays_put(self):
        env = StochasticGridworld(3, 3, slip_prob=0.0)
        rng = np.random.default_rng(0)
        env.reset(rng)
        obs, *_ = env.step(0, rng)
        assert env.state_index() == 0 and obs[0] == 1.0 and obs.sum() == 1.0

    def test_wall_noise_only_on_bumps(self):
        env = StochasticGridworld(3, 3, step_reward=0.0, goal_noise_std=0.0, slip_prob=0.0,
                                  wall_noise_std=1.0)
        rng = np.random.default_rng(0)
        env.reset(rng)
        bumps = [env.step(3, rng)[1] for _ in range(200)]
        assert np.std(bumps) > 0.5
        assert env.step(1, rng)[1] == 0.0

    def test_slip_frequency(self):
        env = StochasticGridworld(5, 5, start=(2, 2), goal=(0, 0), slip_prob=0.4,
                                  goal_noise_std=0.0)
        rng = np.random.default_rng(2)
        n, moved_right = 20_000, 0
        for _ in range(n):
            env.reset(rng)
            env.step(1, rng)
            moved_right += env.state_index() == env.cell_index((2, 3))
        # intended move happens w.p. 1 - p + p/4
        p = 1 - 0.4 + 0.1
        assert moved_right / n == pytest.approx(p, abs=4 * np.sqrt(p * (1 - p) / n))

    @pytest.mark.parametrize("kwargs", [dict(start=(5, 0)), dict(goal=(0, 0)), dict(slip_prob=1.5),
                                        dict(wall_noise_std=-1.0)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            StochasticGridworld(5, 5, **kwargs)


class TestWrappers:
    def test_time_limit_truncates(self):
        env = TimeLimitWrapper(StochasticGridworld(5, 5, slip_prob=0.0), max_steps=3)
        steps = rollout(env, [0, 0, 0, 0], np.random.default_rng(0))
        assert len(steps) == 3
        assert steps[-1][3] and not steps[-1][2]

    def test_terminal_on_last_step_is_not_truncated(self):
        env = TimeLimitWrapper(StochasticGridworld(2, 1, slip_prob=0.0), max_steps=1)
        (step,) = rollout(env, [1], np.random.default_rng(0))
        assert step[2] and not step[3]

    def test_reward_clip(self):
        env = RewardClipWrapper(StochasticGridworld(2, 1, goal_reward=5.0, goal_noise_std=0.0,
                                                    step_reward=0.0, slip_prob=0.0))
        (step,) = rollout(env, [1], np.random.default_rng(0))
        assert step[1] == 1.0

    def test_sticky_first_step_always_executes(self):
        env = StickyActionWrapper(StochasticGridworld(slip_prob=0.0), sticky_prob=1.0)
        rng = np.random.default_rng(0)
        env.reset(rng)
        env.step(1, rng)
        env.step(2, rng)
        assert env.last_action == 1 and env.n_sticky == 1

    def test_sticky_rate(self):
        env = StickyActionWrapper(StochasticGridworld(9, 9, slip_prob=0.0, goal=(8, 8)), 0.25)
        rng = np.random.default_rng(4)
        env.reset(rng)
        for t in range(100_000):
            if env.step(t % 2 * 2, rng)[2]:
                env.reset(rng)
        # the first step of each episode is never substituted
        assert env.n_sticky / env.n_steps == pytest.approx(0.25, abs=0.01)

    def test_make_env_order(self):
        env = make_env("gridworld", sticky_prob=0.25, max_steps=10, clip_rewards=True)
        assert isinstance(env, TimeLimitWrapper)
        assert isinstance(env.env, RewardClipWrapper)
        assert isinstance(env.env.env, StickyActionWrapper)
        assert isinstance(env.unwrapped, StochasticGridworld)


def empirical_kernel(env, state_setter, action, n, rng):
    counts = {}
    for _ in range(n):
        env.reset(rng)
        state_setter(env)
        env.step(action, rng)
        s2 = env.state_index()
        counts[s2] = counts.get(s2, 0) + 1
    return counts


class TestTabularForm:
    @pytest.mark.parametrize("cell,action", [((0, 0), 0), ((1, 1), 1), ((2, 0), 3)])
    def test_grid_transitions_match_simulation(self, cell, action):
        env = StochasticGridworld(3, 3, slip_prob=0.3)
        mdp = to_tabular(env)
        n = 100_000

        def put(e):
            e._cell = cell

        counts = empirical_kernel(env, put, action, n, np.random.default_rng(5))
        s = env.cell_index(cell)
        for s2 in range(mdp.n_states):
            p = mdp.transition[s, action, s2]
            freq = counts.get(s2, 0) / n
            assert freq == pytest.approx(p, abs=3 * np.sqrt(p * (1 - p) / n) + 1e-9)

    def test_grid_reward_moments_match_simulation(self):
        env = StochasticGridworld(2, 1, step_reward=-0.2, goal_reward=1.0, goal_noise_std=0.5,
                                  step_noise_std=0.3, slip_prob=0.0)
        mdp = to_tabular(env)
        rng = np.random.default_rng(6)
        rs = np.array([rollout(env, [1], rng)[0][1] for _ in range(20_000)])
        assert rs.mean() == pytest.approx(mdp.reward[0, 1, 1], abs=0.02)
        assert rs.std() == pytest.approx(mdp.reward_std[0, 1, 1], rel=0.03)

    def test_wall_noise_in_tabular_std(self):
        mdp = to_tabular(StochasticGridworld(3, 3, slip_prob=0.0, wall_noise_std=2.0,
                                             step_noise_std=0.0))
        assert mdp.reward_std[0, 0, 0] == pytest.approx(2.0)
        assert mdp.reward_std[0, 1, 1] == 0.0

    def test_rows_are_distributions(self):
        for env in (make_env("gridworld"), make_env("maxbias"), make_env("gridworld", sticky_prob=0.25)):
            mdp = to_tabular(env)
            np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0)

    def test_sticky_state_index_matches_tabular(self):
        env = make_env("gridworld", sticky_prob=0.5, width=3, height=3, slip_prob=0.0)
        mdp = to_tabular(env)
        rng = np.random.default_rng(7)
        env.reset(rng)
        x = env.state_index()
        assert x == mdp.start_state
        for a in [1, 2, 1]:
            probs = mdp.transition[x, a]
            env.step(a, rng)
            x = env.state_index()
            assert probs[x] > 0

    def test_clip_has_no_tabular_form(self):
        with pytest.raises(ValueError):
            to_tabular(make_env("gridworld", clip_rewards=True))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 5), st.integers(2, 5), st.floats(0.0, 1.0))
    def test_goal_is_only_terminal(self, w, h, slip):
        mdp = to_tabular(StochasticGridworld(w, h, slip_prob=slip))
        assert mdp.terminal_states == frozenset({w * h - 1})


def test_monte_carlo_returns_match_policy_evaluation():
    from ddql.tabular import policy_q_evaluation

    env = make_env("gridworld", slip_prob=0.0)
    mdp = to_tabular(env, gamma=0.95)
    pi = np.full((25, 4), 0.1)
    pi[:, 1] += 0.3
    pi[:, 2] += 0.3
    v_start = pi[0] @ policy_q_evaluation(mdp, pi)[0]
    rng = np.random.default_rng(8)
    returns = []
    for _ in range(4000):
        env.reset(rng)
        g, disc, done = 0.0, 1.0, False
        while not done:
            _, r, done, _ = env.step(int(rng.choice(4, p=pi[env.state_index()])), rng)
            g += disc * r
            disc *= 0.95
        returns.append(g)
    se = np.std(returns) / np.sqrt(len(returns))
    assert abs(np.mean(returns) - v_start) <= 3 * se
