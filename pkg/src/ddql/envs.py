"""Desk-scale episodic environments and wrappers.

Every environment follows the same small contract::

    obs = env.reset(rng)
    obs, reward, terminal, truncated = env.step(action, rng)

Randomness comes only from the ``rng`` passed in, so runs are reproducible
from their seeds. ``terminal`` and ``truncated`` are never both true; after
either, :meth:`Env.step` raises :class:`EpisodeOverError` until the next reset.
"""

import abc

import numpy as np

from ._validation import check_in_range, check_positive_int
from .tabular import TabularMdp


class EpisodeOverError(RuntimeError):
    """``step`` was called on an episode that already ended."""


class Env(abc.ABC):
    observation_dim: int
    n_actions: int

    def __init__(self):
        self._active = False

    def reset(self, rng):
        self._active = True
        return self._reset(rng)

    def step(self, action, rng):
        if not self._active:
            raise EpisodeOverError("episode has ended; call reset() first")
        if not 0 <= action < self.n_actions:
            raise IndexError(f"action {action} out of range [0, {self.n_actions})")
        obs, reward, terminal, truncated = self._step(int(action), rng)
        if terminal or truncated:
            self._active = False
        return obs, reward, terminal, truncated

    @abc.abstractmethod
    def _reset(self, rng):
        ...

    @abc.abstractmethod
    def _step(self, action, rng):
        ...

    @property
    def unwrapped(self):
        return self

    def state_index(self):
        """Index of the current state in :func:`to_tabular`'s MDP."""
        raise NotImplementedError(f"{type(self).__name__} has no tabular form")


class MaxBiasChain(Env):
    """Two-step chain that baits greedy maximization.

    From ``A``, action 0 (left) moves to ``B`` and action 1 (right) ends the
    episode, both with reward 0. From ``B`` every arm ends the episode with a
    Gaussian reward of mean ``arm_mean`` (negative) and std ``arm_std``.
    Actions above 1 at ``A`` behave like right; the tabular form masks them.
    """

    A, B, TERMINAL = 0, 1, 2
    LEFT, RIGHT = 0, 1

    def __init__(self, n_arms=8, arm_mean=-0.1, arm_std=1.0):
        super().__init__()
        if n_arms < 2:
            raise ValueError("n_arms must be at least 2")
        self.n_arms = int(n_arms)
        self.arm_mean = float(arm_mean)
        self.arm_std = float(arm_std)
        self.n_actions = self.n_arms
        self.observation_dim = 3
        self._state = self.A

    def _obs(self):
        obs = np.zeros(3)
        obs[self._state] = 1.0
        return obs

    def _reset(self, rng):
        self._state = self.A
        return self._obs()

    def _step(self, action, rng):
        if self._state == self.A:
            self._state = self.B if action == self.LEFT else self.TERMINAL
            return self._obs(), 0.0, self._state == self.TERMINAL, False
        self._state = self.TERMINAL
        return self._obs(), self.arm_mean + self.arm_std * rng.standard_normal(), True, False

    def state_index(self):
        return self._state


class StochasticGridworld(Env):
    """Grid with a noisy goal reward and slippery moves.

    Actions are 0 up, 1 right, 2 down, 3 left; moving into a wall stays put.
    With probability ``slip_prob`` the chosen action is replaced by one drawn
    uniformly from all four. Every move pays ``step_reward`` plus Gaussian
    noise of std ``step_noise_std``; a move that hits a wall (and so stays
    put) adds noise of std ``wall_noise_std``; entering the goal additionally
    pays ``goal_reward`` plus noise of std ``goal_noise_std`` and ends the
    episode.
    Observations are one-hot cell encodings; cell ``(row, col)`` has index
    ``row * width + col``.
    """

    MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))

    def __init__(self, width=5, height=5, start=(0, 0), goal=None, step_reward=-0.01,
                 goal_reward=1.0, goal_noise_std=0.5, step_noise_std=0.0, slip_prob=0.1,
                 wall_noise_std=0.0):
        super().__init__()
        self.width = check_positive_int(width, "width")
        self.height = check_positive_int(height, "height")
        self.start = tuple(start)
        self.goal = (height - 1, width - 1) if goal is None else tuple(goal)
        for name, (r, c) in (("start", self.start), ("goal", self.goal)):
            if not (0 <= r < height and 0 <= c < width):
                raise ValueError(f"{name} cell {(r, c)} outside the {height}x{width} grid")
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        self.step_reward = float(step_reward)
        self.goal_reward = float(goal_reward)
        self.goal_noise_std = float(goal_noise_std)
        self.step_noise_std = float(step_noise_std)
        self.wall_noise_std = float(wall_noise_std)
        if min(self.goal_noise_std, self.step_noise_std, self.wall_noise_std) < 0:
            raise ValueError("noise standard deviations must be non-negative")
        self.slip_prob = check_in_range(float(slip_prob), 0.0, 1.0, "slip_prob")
        self.n_actions = 4
        self.observation_dim = width * height
        self._cell = self.start

    def cell_index(self, cell):
        return cell[0] * self.width + cell[1]

    def move(self, cell, action):
        dr, dc = self.MOVES[action]
        r = min(max(cell[0] + dr, 0), self.height - 1)
        c = min(max(cell[1] + dc, 0), self.width - 1)
        return (r, c)

    def _obs(self):
        obs = np.zeros(self.observation_dim)
        obs[self.cell_index(self._cell)] = 1.0
        return obs

    def _reset(self, rng):
        self._cell = self.start
        return self._obs()

    def _step(self, action, rng):
        if self.slip_prob > 0 and rng.random() < self.slip_prob:
            action = int(rng.integers(4))
        before = self._cell
        self._cell = self.move(before, action)
        reward = self.step_reward
        if self.step_noise_std > 0:
            reward += self.step_noise_std * rng.standard_normal()
        if self.wall_noise_std > 0 and self._cell == before:
            reward += self.wall_noise_std * rng.standard_normal()
        terminal = self._cell == self.goal
        if terminal:
            reward += self.goal_reward
            if self.goal_noise_std > 0:
                reward += self.goal_noise_std * rng.standard_normal()
        return self._obs(), reward, terminal, False

    def state_index(self):
        return self.cell_index(self._cell)


class Wrapper(Env):
    def __init__(self, env):
        super().__init__()
        self.env = env
        self.n_actions = env.n_actions
        self.observation_dim = env.observation_dim

    @property
    def unwrapped(self):
        return self.env.unwrapped

    def _reset(self, rng):
        return self.env.reset(rng)

    def state_index(self):
        return self.env.state_index()


class StickyActionWrapper(Wrapper):
    """With probability ``sticky_prob`` repeat the previously executed action.

    The first step after a reset always executes the chosen action.
    ``n_sticky`` counts substitutions and ``last_action`` is the most recently
    executed action.
    """

    def __init__(self, env, sticky_prob=0.25):
        super().__init__(env)
        self.sticky_prob = check_in_range(float(sticky_prob), 0.0, 1.0, "sticky_prob")
        self.last_action = None
        self.n_sticky = 0
        self.n_steps = 0

    def _reset(self, rng):
        self.last_action = None
        return self.env.reset(rng)

    def _step(self, action, rng):
        self.n_steps += 1
        if self.last_action is not None and self.sticky_prob > 0 and rng.random() < self.sticky_prob:
            action = self.last_action
            self.n_sticky += 1
        self.last_action = action
        return self.env.step(action, rng)

    def state_index(self):
        prev = self.n_actions if self.last_action is None else self.last_action
        return self.env.state_index() * (self.n_actions + 1) + prev


class RewardClipWrapper(Wrapper):
    """Clip rewards to ``[low, high]``."""

    def __init__(self, env, low=-1.0, high=1.0):
        super().__init__(env)
        self.low, self.high = low, high

    def _step(self, action, rng):
        obs, r, terminal, truncated = self.env.step(action, rng)
        return obs, float(np.clip(r, self.low, self.high)), terminal, truncated


class TimeLimitWrapper(Wrapper):
    """Truncate episodes after ``max_steps`` steps without reaching a terminal."""

    def __init__(self, env, max_steps=500):
        super().__init__(env)
        self.max_steps = check_positive_int(max_steps, "max_steps")
        self.elapsed = 0

    def _reset(self, rng):
        self.elapsed = 0
        return self.env.reset(rng)

    def _step(self, action, rng):
        obs, r, terminal, truncated = self.env.step(action, rng)
        self.elapsed += 1
        if not terminal and self.elapsed >= self.max_steps:
            truncated = True
        return obs, r, terminal, truncated


def env_step(env, action, rng):
    """Functional spelling of ``env.step``."""
    return env.step(action, rng)


ENV_NAMES = ("maxbias", "gridworld")


def make_env(name, sticky_prob=0.0, max_steps=None, clip_rewards=False, **params):
    """Build a named environment and apply wrappers in execution order.

    Sticky substitution happens first, then the inner dynamics, then reward
    clipping, then the time-limit check.
    """
    if name == "maxbias":
        env = MaxBiasChain(**params)
    elif name == "gridworld":
        env = StochasticGridworld(**params)
    else:
        raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    if sticky_prob:
        env = StickyActionWrapper(env, sticky_prob)
    if clip_rewards:
        env = RewardClipWrapper(env)
    if max_steps:
        env = TimeLimitWrapper(env, max_steps)
    return env


# ---------------------------------------------------------------------------
# Exact tabular forms


def to_tabular(env, gamma=0.99):
    """Exact finite MDP for a built-in environment.

    Slip and sticky-action mixing are folded into the transition tensor;
    Gaussian rewards appear as their means with the noise recorded in
    ``reward_std``. Time limits are not part of the state and are ignored.
    Sticky actions enlarge the state to ``(state, previous action)`` with
    index ``state * (n_actions + 1) + prev`` (``prev = n_actions`` right after
    a reset), matching :meth:`StickyActionWrapper.state_index`.
    """
    layers = []
    inner = env
    while isinstance(inner, Wrapper):
        layers.append(inner)
        inner = inner.env
    sticky = None
    for layer in layers:
        if isinstance(layer, RewardClipWrapper):
            raise ValueError("reward clipping has no exact tabular form")
        if isinstance(layer, StickyActionWrapper):
            sticky = layer.sticky_prob
    if isinstance(inner, MaxBiasChain):
        mdp = _chain_mdp(inner, gamma)
    elif isinstance(inner, StochasticGridworld):
        mdp = _grid_mdp(inner, gamma)
    else:
        raise ValueError(f"no tabular form for {type(inner).__name__}")
    if sticky is not None:
        mdp = _sticky_mdp(mdp, sticky)
    return mdp


def _chain_mdp(env, gamma):
    A = env.n_actions
    P = np.zeros((3, A, 3))
    R = np.zeros((3, A, 3))
    std = np.zeros((3, A, 3))
    P[0, 0, 1] = 1.0
    P[0, 1:, 2] = 1.0
    P[1, :, 2] = 1.0
    R[1, :, 2] = env.arm_mean
    std[1, :, 2] = env.arm_std
    P[2, :, 2] = 1.0
    mask = np.ones((3, A), dtype=bool)
    mask[0, 2:] = False
    return TabularMdp(P, R, gamma, frozenset({2}), std, 0, mask, ("A", "B", "terminal"))


def _grid_mdp(env, gamma):
    S = env.width * env.height
    A = 4
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    std = np.zeros((S, A, S))
    goal = env.cell_index(env.goal)
    labels = []
    for r in range(env.height):
        for c in range(env.width):
            s = env.cell_index((r, c))
            labels.append(f"({r},{c})")
            if s == goal:
                P[s, :, s] = 1.0
                continue
            for a in range(A):
                for e in range(A):
                    p = (1.0 - env.slip_prob) * (e == a) + env.slip_prob / A
                    if p == 0:
                        continue
                    s2 = env.cell_index(env.move((r, c), e))
                    P[s, a, s2] += p
                    at_goal = s2 == goal
                    R[s, a, s2] = env.step_reward + (env.goal_reward if at_goal else 0.0)
                    var = env.step_noise_std ** 2 + (env.goal_noise_std ** 2 if at_goal else 0.0)
                    if s2 == s:
                        # only a wall bump leaves the cell unchanged
                        var += env.wall_noise_std ** 2
                    std[s, a, s2] = np.sqrt(var)
    return TabularMdp(P, R, gamma, frozenset({goal}), std, env.cell_index(env.start),
                      None, tuple(labels))


def _sticky_mdp(mdp, p):
    S, A = mdp.n_states, mdp.n_actions
    K = A + 1
    P = np.zeros((S * K, A, S * K))
    R = np.zeros_like(P)
    std = np.zeros_like(P)
    mask = np.zeros((S * K, A), dtype=bool)
    terminals = set()
    for s in range(S):
        for prev in range(K):
            x = s * K + prev
            mask[x] = mdp.action_mask[s]
            if s in mdp.terminal_states:
                terminals.add(x)
                P[x, :, x] = 1.0
                continue
            for a in range(A):
                mix = {a: 1.0} if prev == A or p == 0 else {a: 1.0 - p}
                if prev != A and p > 0:
                    mix[prev] = mix.get(prev, 0.0) + p
                for e, w in mix.items():
                    for s2 in np.flatnonzero(mdp.transition[s, e]):
                        y = s2 * K + e
                        P[x, a, y] += w * mdp.transition[s, e, s2]
                        R[x, a, y] = mdp.reward[s, e, s2]
                        std[x, a, y] = mdp.reward_std[s, e, s2]
    labels = None
    if mdp.state_labels:
        labels = tuple(f"{mdp.state_labels[s]}|{'-' if k == A else k}" for s in range(S) for k in range(K))
    return TabularMdp(P, R, mdp.gamma, frozenset(terminals), std, mdp.start_state * K + A, mask, labels)
