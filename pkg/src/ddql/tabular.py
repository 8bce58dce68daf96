"""Finite-MDP machinery: tabular Q-learning, Double Q-learning and exact oracles.

The oracles (:func:`value_iteration`, :func:`policy_q_evaluation`) work on
expected rewards, so they are exact even when the MDP carries Gaussian reward
noise; the noise is only realized by :meth:`TabularMdp.sample`.
"""

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    as_generator,
    check_distribution_rows,
    check_finite,
    check_in_range,
    check_index,
    check_row,
)

TIE_ATOL = 1e-12


class Step(NamedTuple):
    """One tabular transition ``(s, a, r, s', terminal)``."""

    state: int
    action: int
    reward: float
    next_state: int
    terminal: bool


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Explicit finite MDP.

    Parameters
    ----------
    transition : array of shape (n_states, n_actions, n_states)
        ``P(s' | s, a)``.
    reward : array of shape (n_states, n_actions, n_states)
        Mean reward ``R(s, a, s')``.
    gamma : float
        Discount in ``[0, 1)``.
    terminal_states : iterable of int
        Absorbing states; they must self-loop with zero reward.
    reward_std : array of shape (n_states, n_actions[, n_states]), optional
        Standard deviation of zero-mean Gaussian noise added to the reward
        drawn by :meth:`sample`, per ``(s, a)`` or per ``(s, a, s')``.
    start_state : int
        State used by :meth:`reset`-style rollouts.
    action_mask : bool array of shape (n_states, n_actions), optional
        Actions a learner is allowed to take in each state. Masked actions are
        ignored by maximizations, greedy policies and exploration.
    state_labels : list of str, optional
        Display names used by the oracle printer.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal_states: frozenset = field(default_factory=frozenset)
    reward_std: Optional[np.ndarray] = None
    start_state: int = 0
    action_mask: Optional[np.ndarray] = None
    state_labels: Optional[tuple] = None

    def __post_init__(self):
        P = check_finite(self.transition, "transition")
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        R = check_finite(self.reward, "reward")
        if R.shape != P.shape:
            raise ValueError(f"reward shape {R.shape} != transition shape {P.shape}")
        check_in_range(float(self.gamma), 0.0, 1.0, "gamma", high_open=True)
        check_distribution_rows(P, axis=-1, name="transition")
        terminals = frozenset(int(s) for s in self.terminal_states)
        for s in terminals:
            check_index(s, S, "terminal state")
            if not np.all(P[s, :, s] == 1.0):
                raise ValueError(f"terminal state {s} must self-loop under every action")
            if np.any(R[s] != 0.0):
                raise ValueError(f"terminal state {s} must carry zero reward")
        std = np.zeros((S, A, S)) if self.reward_std is None else check_finite(self.reward_std, "reward_std")
        if std.shape == (S, A):
            std = np.repeat(std[:, :, None], S, axis=2)
        if std.shape != (S, A, S) or np.any(std < 0):
            raise ValueError("reward_std must be a non-negative (S, A) or (S, A, S) array")
        for s in terminals:
            if np.any(std[s] != 0):
                raise ValueError(f"terminal state {s} cannot have reward noise")
        mask = np.ones((S, A), dtype=bool) if self.action_mask is None else np.asarray(self.action_mask, dtype=bool)
        if mask.shape != (S, A) or not np.all(mask.any(axis=1)):
            raise ValueError("action_mask must be (S, A) with at least one valid action per state")
        check_index(int(self.start_state), S, "start_state")
        P.setflags(write=False)
        R.setflags(write=False)
        std.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "terminal_states", terminals)
        object.__setattr__(self, "reward_std", std)
        object.__setattr__(self, "action_mask", mask)
        object.__setattr__(self, "start_state", int(self.start_state))
        terminal_flags = np.zeros(S, dtype=bool)
        terminal_flags[list(terminals)] = True
        terminal_flags.setflags(write=False)
        object.__setattr__(self, "_terminal", terminal_flags)
        object.__setattr__(self, "_cumulative", np.cumsum(P, axis=-1))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def is_terminal(self):
        """Boolean vector flagging terminal states."""
        return self._terminal

    @property
    def expected_reward(self):
        """Mean one-step reward ``r(s, a) = sum_s' P(s'|s,a) R(s,a,s')``."""
        return np.einsum("ijk,ijk->ij", self.transition, self.reward)

    def sample(self, state, action, rng):
        """Draw ``(next_state, reward, terminal)`` from the dynamics."""
        cum = self._cumulative[state, action]
        nxt = int(np.searchsorted(cum, rng.random(), side="right"))
        nxt = min(nxt, self.n_states - 1)
        r = self.reward[state, action, nxt]
        std = self.reward_std[state, action, nxt]
        if std > 0:
            r = r + std * rng.standard_normal()
        return nxt, float(r), bool(self._terminal[nxt])

    def to_text(self):
        """Serialize to the plain-text MDP format read by :func:`parse_mdp`."""
        S, A = self.n_states, self.n_actions
        lines = [
            f"n_states {S}",
            f"n_actions {A}",
            f"gamma {self.gamma!r}",
            f"start {self.start_state}",
        ]
        if self.terminal_states:
            lines.append("terminal " + " ".join(str(s) for s in sorted(self.terminal_states)))
        for s in range(S):
            if s in self.terminal_states:
                continue
            for a in range(A):
                for s2 in np.flatnonzero(self.transition[s, a]):
                    lines.append(f"t {s} {a} {s2} {float(self.transition[s, a, s2])!r} "
                                 f"{float(self.reward[s, a, s2])!r}")
                    if self.reward_std[s, a, s2] > 0:
                        lines.append(f"noise {s} {a} {s2} {float(self.reward_std[s, a, s2])!r}")
                if not self.action_mask[s, a]:
                    lines.append(f"invalid {s} {a}")
        return "\n".join(lines) + "\n"


def parse_mdp(text):
    """Parse the plain-text MDP format.

    One directive per line, ``#`` starts a comment::

        n_states 3
        n_actions 2
        gamma 0.99
        start 0                 # optional, default 0
        terminal 2              # any number of state indices
        t 0 1 2 1.0 0.0         # s a s' probability reward
        noise 1 0 1.0           # s a reward-std (optional)
        noise 1 0 2 1.0         # s a s' reward-std (optional)
        invalid 0 1             # s a excluded from the action set (optional)

    Terminal states get their self-loops filled in automatically and must not
    appear in ``t`` rows.
    """
    header = {}
    terminals = []
    rows, noise, invalid = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        try:
            if key in ("n_states", "n_actions", "start"):
                header[key] = int(args[0])
            elif key == "gamma":
                header[key] = float(args[0])
            elif key == "terminal":
                terminals.extend(int(x) for x in args)
            elif key == "t":
                s, a, s2 = (int(x) for x in args[:3])
                rows.append((s, a, s2, float(args[3]), float(args[4])))
            elif key == "noise":
                if len(args) == 3:
                    noise.append((int(args[0]), int(args[1]), None, float(args[2])))
                else:
                    noise.append((int(args[0]), int(args[1]), int(args[2]), float(args[3])))
            elif key == "invalid":
                invalid.append((int(args[0]), int(args[1])))
            else:
                raise ValueError(f"unknown directive {key!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {raw.strip()!r}: {exc}") from None
    for key in ("n_states", "n_actions", "gamma"):
        if key not in header:
            raise ValueError(f"missing required directive {key!r}")
    S, A = header["n_states"], header["n_actions"]
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    std = np.zeros((S, A, S))
    mask = np.ones((S, A), dtype=bool)
    for s, a, s2, p, r in rows:
        for idx, upper, name in ((s, S, "s"), (a, A, "a"), (s2, S, "s'")):
            check_index(idx, upper, name)
        if s in terminals:
            raise ValueError(f"terminal state {s} cannot have transition rows")
        P[s, a, s2] += p
        R[s, a, s2] = r
    for s in terminals:
        P[s, :, s] = 1.0
    for s, a, s2, sd in noise:
        if s2 is None:
            std[s, a, :] = sd
        else:
            std[s, a, s2] = sd
    for s, a in invalid:
        mask[s, a] = False
    return TabularMdp(P, R, header["gamma"], frozenset(terminals), std,
                      header.get("start", 0), mask)


def load_mdp(path):
    with open(path) as fh:
        return parse_mdp(fh.read())


# ---------------------------------------------------------------------------
# Policies and single-step updates


def greedy_policy_distribution(q_row, mask=None, atol=TIE_ATOL):
    """Greedy policy over one row of action values.

    Every action within ``atol`` of the maximum gets probability
    ``1 / |G(s)|``; all others get 0.

    >>> greedy_policy_distribution([1.0, 1.0, 0.0])
    array([0.5, 0.5, 0. ])
    """
    q = check_row(q_row)
    valid = np.ones(q.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    top = np.max(q[valid])
    greedy = valid & (q >= top - atol)
    return greedy / greedy.sum()


def greedy_action(q_row, mask=None):
    """Argmax with ties broken by the lowest index (deterministic)."""
    if mask is None:
        return int(np.argmax(q_row))
    return int(np.argmax(np.where(mask, q_row, -np.inf)))


def greedy_policy(q, mdp=None):
    """Greedy policy table for a whole Q-table (rows split ties uniformly)."""
    q = np.asarray(q, dtype=np.float64)
    masks = mdp.action_mask if mdp is not None else np.ones(q.shape, dtype=bool)
    return np.stack([greedy_policy_distribution(row, m) for row, m in zip(q, masks)])


def _check_step(q, step):
    S, A = q.shape
    s = check_index(step.state, S, "state")
    a = check_index(step.action, A, "action")
    s2 = check_index(step.next_state, S, "next_state")
    return s, a, s2


def _ensure_finite_entry(value, where):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite Q-value produced at {where}")


def q_learning_step(q, step, alpha, gamma, mask=None, inplace=False):
    """Apply one Q-learning update to a Q-table.

    Returns the updated table. Only ``q[s, a]`` changes; when ``s'`` is
    terminal the target is just the reward. With ``inplace=False`` (default)
    the input table is left untouched.
    """
    q = np.asarray(q, dtype=np.float64)
    s, a, s2 = _check_step(q, step)
    check_in_range(alpha, 0.0, 1.0, "alpha")
    out = q if inplace else q.copy()
    if step.terminal:
        target = step.reward
    else:
        row = out[s2] if mask is None else out[s2][mask[s2]]
        target = step.reward + gamma * np.max(row)
    out[s, a] += alpha * (target - out[s, a])
    _ensure_finite_entry(out[s, a], (s, a))
    return out


UPDATE_Q1, UPDATE_Q2 = 1, 2


def double_q_learning_step(q1, q2, step, alpha, gamma, coin, mask=None, inplace=False):
    """Apply one Double Q-learning update.

    ``coin`` picks the table to update (``1`` or ``2``). The updated table
    selects the greedy next action, the other table evaluates it. Returns the
    pair ``(q1, q2)``; the table that is not updated is returned as given.
    """
    if coin not in (UPDATE_Q1, UPDATE_Q2):
        raise ValueError(f"coin must be 1 or 2, got {coin!r}")
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    if q1.shape != q2.shape:
        raise ValueError("Q-tables must share a shape")
    s, a, s2 = _check_step(q1, step)
    check_in_range(alpha, 0.0, 1.0, "alpha")
    learner, evaluator = (q1, q2) if coin == UPDATE_Q1 else (q2, q1)
    out = learner if inplace else learner.copy()
    if step.terminal:
        target = step.reward
    else:
        a_star = greedy_action(out[s2], None if mask is None else mask[s2])
        target = step.reward + gamma * evaluator[s2, a_star]
    out[s, a] += alpha * (target - out[s, a])
    _ensure_finite_entry(out[s, a], (s, a))
    return (out, q2) if coin == UPDATE_Q1 else (q1, out)


# ---------------------------------------------------------------------------
# Oracles


def _masked_max(q, mask):
    return np.max(np.where(mask, q, -np.inf), axis=1)


def value_iteration(mdp, tolerance=1e-10, max_iter=10_000_000):
    """Optimal action values ``q*`` by value iteration on expected rewards.

    Iterates until successive iterates differ by less than ``tolerance`` in
    max norm.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    r = mdp.expected_reward
    P = mdp.transition
    live = ~mdp.is_terminal
    q = np.zeros_like(r)
    for _ in range(max_iter):
        v = np.where(live, _masked_max(q, mdp.action_mask), 0.0)
        new = r + mdp.gamma * P @ v
        new[~live] = 0.0
        delta = np.max(np.abs(new - q))
        q = new
        if delta < tolerance:
            return q
    raise RuntimeError(f"value iteration did not reach tolerance {tolerance} in {max_iter} sweeps")


def policy_q_evaluation(mdp, policy, tolerance=1e-10):
    """Action values ``q_pi`` of a stochastic policy.

    Solves the policy Bellman equation ``q = r + gamma P pi q`` directly as a
    linear system, then checks the residual against ``tolerance``.
    """
    S, A = mdp.n_states, mdp.n_actions
    pi = check_distribution_rows(policy, axis=1, atol=1e-9, name="policy")
    if pi.shape != (S, A):
        raise ValueError(f"policy must have shape {(S, A)}, got {pi.shape}")
    live = ~mdp.is_terminal
    # M[(s,a), (s',a')] = P(s'|s,a) pi(a'|s') restricted to live successors
    M = np.einsum("ijk,kl->ijkl", mdp.transition * live[None, None, :], pi).reshape(S * A, S * A)
    r = mdp.expected_reward.copy()
    r[~live] = 0.0
    lhs = np.eye(S * A) - mdp.gamma * M
    q = np.linalg.solve(lhs, r.reshape(-1))
    residual = np.max(np.abs(lhs @ q - r.reshape(-1)))
    if residual > tolerance * max(1.0, np.max(np.abs(q))):
        raise np.linalg.LinAlgError(f"policy evaluation residual {residual:.3g} exceeds tolerance")
    q = q.reshape(S, A)
    q[~live] = 0.0
    return q


def bellman_optimality_residual(mdp, q):
    """Max-norm gap between ``q`` and the Bellman optimality operator applied to it."""
    live = ~mdp.is_terminal
    v = np.where(live, _masked_max(q, mdp.action_mask), 0.0)
    tq = mdp.expected_reward + mdp.gamma * mdp.transition @ v
    tq[~live] = 0.0
    return float(np.max(np.abs(tq - q)))


# ---------------------------------------------------------------------------
# Learners


def _behavior_action(scores, mask, epsilon, tie_break, rng):
    valid = np.flatnonzero(mask)
    if rng.random() < epsilon:
        return int(valid[rng.integers(len(valid))])
    if tie_break == "uniform":
        probs = greedy_policy_distribution(scores, mask)
        return int(rng.choice(len(probs), p=probs))
    return greedy_action(scores, mask)


class _TabularLearner(BaseEstimator):
    """Shared episode loop for the tabular learners."""

    def __init__(self, alpha=0.1, alpha_exponent=0.0, epsilon=0.1, tie_break="first",
                 exploring_starts=False, max_episode_steps=None, random_state=None):
        self.alpha = alpha
        self.alpha_exponent = alpha_exponent
        self.epsilon = epsilon
        self.tie_break = tie_break
        self.exploring_starts = exploring_starts
        self.max_episode_steps = max_episode_steps
        self.random_state = random_state

    def _step_size(self, visits):
        """Per-pair step size ``alpha * n^-exponent``; exponent 0 keeps it constant."""
        if self.alpha_exponent == 0:
            return self.alpha
        return min(1.0, self.alpha * visits ** (-self.alpha_exponent))

    def _validate(self, mdp):
        check_in_range(self.alpha, 0.0, 1.0, "alpha", low_open=True)
        check_in_range(self.epsilon, 0.0, 1.0, "epsilon")
        if self.alpha_exponent < 0:
            raise ValueError("alpha_exponent must be non-negative")
        if self.tie_break not in ("first", "uniform"):
            raise ValueError(f"tie_break must be 'first' or 'uniform', got {self.tie_break!r}")
        if not isinstance(mdp, TabularMdp):
            raise TypeError("fit expects a TabularMdp; use envs.to_tabular for environments")

    def fit(self, mdp, n_steps=None, n_episodes=None, callback: Optional[Callable] = None):
        """Learn from simulated interaction with ``mdp``.

        Stops after ``n_steps`` environment steps or ``n_episodes`` episodes,
        whichever is given (exactly one must be). ``callback(learner, step,
        episode, t)`` is called after every update.
        """
        self._validate(mdp)
        if (n_steps is None) == (n_episodes is None):
            raise ValueError("pass exactly one of n_steps or n_episodes")
        rng = as_generator(self.random_state)
        self._init_tables(mdp)
        self.visits_ = np.zeros((self._n_tables(), mdp.n_states, mdp.n_actions))
        self.n_steps_ = 0
        self.n_episodes_ = 0
        starts = np.flatnonzero(~mdp.is_terminal)
        limit = self.max_episode_steps
        while True:
            if n_episodes is not None and self.n_episodes_ >= n_episodes:
                break
            s = int(starts[rng.integers(len(starts))]) if self.exploring_starts else mdp.start_state
            t = 0
            done = bool(mdp.is_terminal[s])
            while not done:
                if n_steps is not None and self.n_steps_ >= n_steps:
                    return self
                a = _behavior_action(self._scores(s), mdp.action_mask[s], self.epsilon, self.tie_break, rng)
                s2, r, terminal = mdp.sample(s, a, rng)
                step = Step(s, a, r, s2, terminal)
                self._update(step, mdp, rng)
                self.n_steps_ += 1
                t += 1
                if callback is not None:
                    callback(self, step, self.n_episodes_, t - 1)
                s = s2
                done = terminal or (limit is not None and t >= limit)
            self.n_episodes_ += 1
        return self

    def predict(self, states):
        """Greedy action (lowest-index ties) for each state index."""
        check_is_fitted(self, "n_steps_")
        q = self.q_values_
        return np.array([greedy_action(q[int(s)], self._mask[int(s)]) for s in np.atleast_1d(states)])


class QLearning(_TabularLearner):
    """Tabular Q-learning with an epsilon-greedy behavior policy.

    Attributes
    ----------
    q_ : ndarray of shape (n_states, n_actions)
        Learned action values.
    """

    def _n_tables(self):
        return 1

    def _init_tables(self, mdp):
        self.q_ = np.zeros((mdp.n_states, mdp.n_actions))
        self._mask = mdp.action_mask
        self._gamma = mdp.gamma

    def _scores(self, s):
        return self.q_[s]

    def _update(self, step, mdp, rng):
        self.visits_[0, step.state, step.action] += 1
        alpha = self._step_size(self.visits_[0, step.state, step.action])
        q_learning_step(self.q_, step, alpha, self._gamma, mask=self._mask, inplace=True)

    @property
    def q_values_(self):
        return self.q_


class DoubleQLearning(_TabularLearner):
    """Tabular Double Q-learning.

    Each step flips a fair coin to choose which table to update. The behavior
    policy is epsilon-greedy on ``Q1 + Q2``.

    Attributes
    ----------
    q1_, q2_ : ndarray of shape (n_states, n_actions)
    """

    def _n_tables(self):
        return 2

    def _init_tables(self, mdp):
        self.q1_ = np.zeros((mdp.n_states, mdp.n_actions))
        self.q2_ = np.zeros((mdp.n_states, mdp.n_actions))
        self._mask = mdp.action_mask
        self._gamma = mdp.gamma

    def _scores(self, s):
        return self.q1_[s] + self.q2_[s]

    def _update(self, step, mdp, rng):
        coin = UPDATE_Q1 if rng.random() < 0.5 else UPDATE_Q2
        self.visits_[coin - 1, step.state, step.action] += 1
        alpha = self._step_size(self.visits_[coin - 1, step.state, step.action])
        double_q_learning_step(self.q1_, self.q2_, step, alpha, self._gamma, coin,
                               mask=self._mask, inplace=True)

    @property
    def q_values_(self):
        """Average of the two tables."""
        return 0.5 * (self.q1_ + self.q2_)
