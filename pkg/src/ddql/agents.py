"""DQN, Double DQN and Deep Double Q-learning (DDQL) agents.

All agents share one training loop. They differ in how many Q-functions they
learn (one, or two via a double-head or double-network layout) and in which
parameter sets select and evaluate the next action in the bootstrap target.

When updating Q-function ``k`` (``SELF``), the other one is ``OTHER``:

=================  ==================  ===================
variant            selects with        evaluates with
=================  ==================  ===================
dqn                target              target
double_dqn         online              target
ddql_dqn           target, SELF        target, OTHER
ddql_double_dqn    online, SELF        target, OTHER
ddql_inverse       target, SELF        online, OTHER
ddql_no_target     online, SELF        online, OTHER
=================  ==================  ===================

``ddql_inverse`` and ``ddql_no_target`` are known to be unstable; they are
kept so the whole table can be compared.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn
from .replay import (
    Batch,
    BufferStrategy,
    Transition,
    build_masked_batch,
    masked_mse,
    push,
    sample_minibatch,
    sample_two_minibatches,
)

ALGORITHMS = ("dqn", "double_dqn", "ddql")
DDQL_VARIANTS = ("ddql_dqn", "ddql_double_dqn", "ddql_inverse", "ddql_no_target")
UNSTABLE_VARIANTS = ("ddql_inverse", "ddql_no_target")
STREAMS = ("env", "action", "sampling", "routing", "init", "eval")

SELF, OTHER = "self", "other"
ROLE_TABLE = {
    "dqn": (("target", SELF), ("target", SELF)),
    "double_dqn": (("online", SELF), ("target", SELF)),
    "ddql_dqn": (("target", SELF), ("target", OTHER)),
    "ddql_double_dqn": (("online", SELF), ("target", OTHER)),
    "ddql_inverse": (("target", SELF), ("online", OTHER)),
    "ddql_no_target": (("online", SELF), ("online", OTHER)),
}


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class EpsilonSchedule:
    initial: float = 1.0
    final: float = 0.01
    anneal_steps: int = 5000


def epsilon_at(schedule, t):
    """Linearly annealed exploration rate, clamped at ``schedule.final``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if schedule.anneal_steps <= 0 or t >= schedule.anneal_steps:
        return schedule.final
    frac = t / schedule.anneal_steps
    return schedule.initial + frac * (schedule.final - schedule.initial)


@dataclass(frozen=True)
class AgentConfig:
    """Everything that defines an agent apart from its environment.

    ``update_frequency`` defaults to 8 env steps for DDQL and 4 for the
    single-Q baselines; ``target_interval`` counts gradient updates.
    """

    algorithm: str = "ddql"
    head_mode: Optional[str] = None
    bootstrap_variant: Optional[str] = None
    hidden_sizes: tuple = (64, 64)
    activation: str = "relu"
    shared_output_bias: bool = True
    gamma: float = 0.99
    minibatch_size: int = 32
    update_frequency: Optional[int] = None
    target_interval: int = 200
    replay_capacity: int = 50_000
    replay_start_size: int = 1000
    buffer_mode: str = "single"
    disjoint_minibatches: bool = False
    epsilon_initial: float = 1.0
    epsilon_final: float = 0.01
    epsilon_anneal_steps: int = 5000
    eval_epsilon: float = 0.001
    identical_init: bool = True
    adam_step_size: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1.5e-4
    tie_break: str = "first"
    masked_batch: bool = True
    clip_rewards: bool = False

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        is_ddql = self.algorithm == "ddql"
        if self.head_mode is None:
            set_("head_mode", "dual_head" if is_ddql else "single")
        if self.bootstrap_variant is None:
            set_("bootstrap_variant", "ddql_dqn" if is_ddql else self.algorithm)
        if self.update_frequency is None:
            set_("update_frequency", 8 if is_ddql else 4)
        set_("hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if is_ddql:
            if self.head_mode not in ("dual_head", "dual_network"):
                raise ValueError("ddql needs head_mode 'dual_head' or 'dual_network'")
            if self.bootstrap_variant not in DDQL_VARIANTS:
                raise ValueError(f"ddql bootstrap_variant must be one of {DDQL_VARIANTS}")
        else:
            if self.head_mode != "single":
                raise ValueError(f"{self.algorithm} needs head_mode 'single'")
            if self.bootstrap_variant != self.algorithm:
                raise ValueError(f"{self.algorithm} does not take a bootstrap_variant")
            if self.buffer_mode != "single":
                raise ValueError("the double-buffer strategy needs two Q-functions (ddql)")
        if self.update_frequency < 1 or self.target_interval < 1:
            raise ValueError("update_frequency and target_interval must be >= 1")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.replay_start_size < self.minibatch_size:
            raise ValueError("replay_start_size must be >= minibatch_size")
        if self.buffer_mode not in ("single", "double"):
            raise ValueError("buffer_mode must be 'single' or 'double'")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        for name in ("epsilon_initial", "epsilon_final", "eval_epsilon"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.tie_break not in ("first", "uniform"):
            raise ValueError("tie_break must be 'first' or 'uniform'")

    @property
    def uses_target(self):
        return self.bootstrap_variant != "ddql_no_target"

    @property
    def n_heads(self):
        return 1 if self.head_mode == "single" else 2

    @property
    def schedule(self):
        return EpsilonSchedule(self.epsilon_initial, self.epsilon_final, self.epsilon_anneal_steps)

    def architecture(self, input_dim, n_actions):
        return nn.ArchitectureSpec(input_dim, n_actions, self.hidden_sizes, self.activation,
                                   self.head_mode, self.shared_output_bias)

    def adam_hyperparameters(self):
        return dict(step_size=self.adam_step_size, beta1=self.adam_beta1,
                    beta2=self.adam_beta2, eps=self.adam_eps)

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown agent settings: {sorted(unknown)}")
        return cls(**d)


def make_streams(seed):
    """Independent named generators derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


@dataclass
class AgentState:
    online: nn.NetworkParams
    target: Optional[nn.NetworkParams]
    adam: nn.AdamState
    replay: BufferStrategy
    rngs: dict
    env_steps: int = 0
    gradient_updates: int = 0
    target_refreshes: int = 0
    last_loss: float = float("nan")
    aux: dict = field(default_factory=dict)


def init_state(config, input_dim, n_actions, rngs):
    spec = config.architecture(input_dim, n_actions)
    online = nn.init_params(spec, rngs["init"], identical=config.identical_init)
    target = online.copy() if config.uses_target else None
    adam = nn.AdamState.create(online, **config.adam_hyperparameters())
    replay = BufferStrategy(config.replay_capacity, config.buffer_mode, config.disjoint_minibatches)
    return AgentState(online, target, adam, replay, rngs)


def refresh_targets(state):
    """Copy every online parameter into the target set (both Q-functions at once)."""
    if state.target is None:
        return
    state.target = state.online.copy()
    state.target_refreshes += 1


# ---------------------------------------------------------------------------
# Acting


def action_values(params, states):
    """Per-head Q-values averaged over heads (the DDQL behavior scores)."""
    outs = nn.forward(params, states)
    if len(outs) == 1:
        return outs[0]
    return 0.5 * outs[0] + 0.5 * outs[1]


def epsilon_greedy(scores, epsilon, rng, tie_break="first"):
    """Pick an action from one row of scores."""
    if rng.random() < epsilon:
        return int(rng.integers(len(scores)))
    if tie_break == "uniform":
        best = np.flatnonzero(scores >= np.max(scores) - 1e-12)
        return int(best[rng.integers(len(best))])
    return int(np.argmax(scores))


def select_action(state_vector, params, epsilon, rng, tie_break="first"):
    """Epsilon-greedy action on the (head-averaged) Q-values of one state."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    return epsilon_greedy(action_values(params, state_vector)[0], epsilon, rng, tie_break)


# ---------------------------------------------------------------------------
# Targets


def bootstrap_roles(variant, head=0):
    """``((kind, head), (kind, head))`` for the selector and the evaluator."""
    if variant not in ROLE_TABLE:
        raise ValueError(f"unknown bootstrap variant {variant!r}")
    (sel_kind, sel_who), (ev_kind, ev_who) = ROLE_TABLE[variant]
    resolve = lambda who: head if who == SELF else 1 - head  # noqa: E731
    return (sel_kind, resolve(sel_who)), (ev_kind, resolve(ev_who))


class NextStateValues:
    """Lazily evaluated Q-values of the next states under each parameter set."""

    def __init__(self, next_states, online, target):
        self.next_states = next_states
        self.params = {"online": online, "target": target}
        self._cache = {}

    def __getitem__(self, role):
        kind, head = role
        if kind not in self._cache:
            params = self.params[kind]
            if params is None:
                raise ValueError(f"variant needs {kind} parameters, which this agent does not have")
            self._cache[kind] = nn.forward(params, self.next_states)
        outs = self._cache[kind]
        if head >= len(outs):
            raise ValueError(f"{kind} parameters have {len(outs)} head(s), need head {head + 1}")
        return outs[head]


def compute_targets(variant, rewards, terminals, next_values, gamma, head=0):
    """Bootstrap targets for a batch, as trained into Q-function ``head``.

    ``next_values[(kind, k)]`` gives ``Q(s', .)`` for ``kind`` in
    ``{"online", "target"}``. Terminal rows get ``y = r``; truncated rows
    bootstrap like any non-terminal row. Argmax ties go to the lowest index.
    """
    selector, evaluator = bootstrap_roles(variant, head)
    q_sel = next_values[selector]
    q_eval = next_values[evaluator]
    a_star = np.argmax(q_sel, axis=1)
    boot = q_eval[np.arange(len(a_star)), a_star]
    rewards = np.asarray(rewards, dtype=np.float64)
    return np.where(terminals, rewards, rewards + gamma * boot)


def compute_target(variant, transition, online, target, gamma, head=0):
    """Target ``y`` for a single :class:`~ddql.replay.Transition`."""
    nv = NextStateValues(np.asarray(transition.next_state, dtype=np.float64)[None, :], online, target)
    y = compute_targets(variant, [transition.reward], [transition.terminal], nv, gamma, head)
    return float(y[0])


# ---------------------------------------------------------------------------
# Losses


def _check_finite_loss(loss):
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")


def single_q_loss(batch, config, online, target):
    """``(loss, grads)`` for the DQN / Double DQN regression on one minibatch."""
    outs, cache = nn.forward(online, batch.states, return_cache=True)
    rows = np.arange(len(batch))
    nv = NextStateValues(batch.next_states, online, target)
    y = compute_targets(config.bootstrap_variant, batch.rewards, batch.terminals, nv, config.gamma)
    pred = outs[0][rows, batch.actions]
    loss, g = nn.mse_loss_and_grad(pred, y)
    dq = np.zeros_like(outs[0])
    dq[rows, batch.actions] = g
    return loss, nn.backward(online, cache, [dq])


def ddql_loss(b1, b2, config, online, target, masked=None):
    """``L_DDQL = L1(B1) + L2(B2)`` and its gradient for both Q-functions.

    Returns ``(loss, grads, (l1, l2))``. With ``masked=True`` (the default
    taken from ``config.masked_batch``) one forward/backward pass runs on the
    stacked batch with per-row head masks; otherwise two separate passes are
    summed. Both give the same gradients.
    """
    masked = config.masked_batch if masked is None else masked
    if masked:
        return _ddql_loss_masked(b1, b2, config, online, target)
    return _ddql_loss_two_pass(b1, b2, config, online, target)


def _ddql_loss_masked(b1, b2, config, online, target):
    mb = build_masked_batch(b1, b2)
    b = mb.batch
    outs, cache = nn.forward(online, b.states, return_cache=True)
    rows = np.arange(len(b))
    nv = NextStateValues(b.next_states, online, target)
    ys = [compute_targets(config.bootstrap_variant, b.rewards, b.terminals, nv, config.gamma, head=k)
          for k in (0, 1)]
    pred = np.stack([outs[k][rows, b.actions] for k in (0, 1)], axis=1)
    y = np.stack(ys, axis=1)
    loss, g = masked_mse(pred, y, mb.head_mask, mb.loss_scale)
    dqs = []
    for k in (0, 1):
        dq = np.zeros_like(outs[k])
        dq[rows, b.actions] = g[:, k]
        dqs.append(dq)
    grads = nn.backward(online, cache, dqs)
    n = len(b1)
    diff = (pred - y) * mb.head_mask
    l1 = float(np.sum(diff[:n, 0] ** 2)) / n
    l2 = float(np.sum(diff[n:, 1] ** 2)) / n
    return loss, grads, (l1, l2)


def _ddql_loss_two_pass(b1, b2, config, online, target):
    total = {name: np.zeros_like(v) for name, v in online.items()}
    parts = []
    for head, batch in ((0, b1), (1, b2)):
        outs, cache = nn.forward(online, batch.states, return_cache=True)
        rows = np.arange(len(batch))
        nv = NextStateValues(batch.next_states, online, target)
        y = compute_targets(config.bootstrap_variant, batch.rewards, batch.terminals, nv,
                            config.gamma, head=head)
        loss, g = nn.mse_loss_and_grad(outs[head][rows, batch.actions], y)
        dqs = [None, None]
        dq = np.zeros_like(outs[head])
        dq[rows, batch.actions] = g
        dqs[head] = dq
        for name, v in nn.backward(online, cache, dqs).items():
            total[name] += v
        parts.append(loss)
    return parts[0] + parts[1], total, tuple(parts)


# ---------------------------------------------------------------------------
# Training


def gradient_update(config, state):
    """Sample, compute the loss, take one Adam step, maybe refresh targets."""
    rng = state.rngs["sampling"]
    n = config.minibatch_size
    if config.algorithm == "ddql":
        b1, b2 = sample_two_minibatches(state.replay, n, rng)
        loss, grads, _ = ddql_loss(b1, b2, config, state.online, state.target)
    else:
        batch = sample_minibatch(state.replay, n, rng)
        loss, grads = single_q_loss(batch, config, state.online, state.target)
    _check_finite_loss(loss)
    state.online, state.adam = nn.adam_step(state.online, grads, state.adam)
    state.gradient_updates += 1
    state.last_loss = loss
    if state.gradient_updates % config.target_interval == 0:
        refresh_targets(state)
    return loss


def update_due(config, env_steps):
    """True when an update follows env step number ``env_steps`` (1-based)."""
    past = env_steps - config.replay_start_size
    return past > 0 and past % config.update_frequency == 0


@dataclass
class Hook:
    """Callback ``fn(config, state)`` fired every ``interval`` env steps."""

    interval: int
    fn: Callable


def train(config, state, env, total_steps, hooks=()):
    """Run ``total_steps`` environment steps of the training loop.

    Each step: act epsilon-greedily on the averaged online Q-values, step the
    environment, store the transition, and every ``update_frequency`` steps
    past the warmup perform exactly one gradient update. Targets refresh
    every ``target_interval`` gradient updates. Episodes that end (terminal
    or truncated) are restarted immediately. Returns ``state``.
    """
    rngs = state.rngs
    obs = state.aux.pop("obs", None)
    if obs is None:
        obs = env.reset(rngs["env"])
    schedule = config.schedule
    for _ in range(total_steps):
        eps = epsilon_at(schedule, state.env_steps)
        action = select_action(obs, state.online, eps, rngs["action"], config.tie_break)
        nxt, reward, terminal, truncated = env.step(action, rngs["env"])
        stored = float(np.clip(reward, -1.0, 1.0)) if config.clip_rewards else reward
        push(state.replay, Transition(obs, action, stored, nxt, terminal, truncated), rngs["routing"])
        state.env_steps += 1
        if update_due(config, state.env_steps):
            gradient_update(config, state)
        obs = env.reset(rngs["env"]) if (terminal or truncated) else nxt
        for hook in hooks:
            if state.env_steps % hook.interval == 0:
                hook.fn(config, state)
    state.aux["obs"] = obs
    return state


# ---------------------------------------------------------------------------
# Checkpoints


def save_agent(path, config, state):
    param_sets = {"online": state.online}
    if state.target is not None:
        param_sets["target"] = state.target
    header = {
        "config": config.to_dict(),
        "env_steps": state.env_steps,
        "gradient_updates": state.gradient_updates,
        "target_refreshes": state.target_refreshes,
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
    }
    nn.save_checkpoint(path, param_sets, header, adam={"online": state.adam})


def load_agent(path):
    """Restore ``(config, state)``; the replay buffer comes back empty."""
    header, param_sets, adam = nn.load_checkpoint(path)
    config = AgentConfig.from_dict(header["config"])
    rngs = {}
    for name, st in header["rng"].items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        rngs[name] = g
    state = AgentState(param_sets["online"], param_sets.get("target"), adam["online"],
                       BufferStrategy(config.replay_capacity, config.buffer_mode, config.disjoint_minibatches),
                       rngs, header["env_steps"], header["gradient_updates"], header["target_refreshes"])
    return config, state


# ---------------------------------------------------------------------------
# Estimator front end


class DeepQAgent(BaseEstimator):
    """Value-based deep RL agent with a scikit-learn style interface.

    ``fit(env)`` trains for ``total_steps`` environment steps; ``predict``
    returns greedy actions for a batch of observations and
    ``decision_function`` the (head-averaged) Q-values behind them.

    Parameters mirror :class:`AgentConfig`; ``random_state`` is the master
    seed from which every random stream of the run is derived.

    Examples
    --------
    >>> from ddql.envs import make_env
    >>> agent = DeepQAgent(algorithm="ddql", head_mode="dual_network",
    ...                    total_steps=2000, random_state=0)
    >>> agent.fit(make_env("gridworld", max_steps=100)).predict(np.eye(25)[:2]).shape
    (2,)
    """

    def __init__(self, algorithm="ddql", head_mode=None, bootstrap_variant=None, hidden_sizes=(64, 64),
                 activation="relu", shared_output_bias=True, gamma=0.99, minibatch_size=32,
                 update_frequency=None, target_interval=200, replay_capacity=50_000,
                 replay_start_size=1000, buffer_mode="single", disjoint_minibatches=False,
                 epsilon_initial=1.0, epsilon_final=0.01, epsilon_anneal_steps=5000,
                 eval_epsilon=0.001, identical_init=True, adam_step_size=1e-3, adam_beta1=0.9,
                 adam_beta2=0.999, adam_eps=1.5e-4, tie_break="first", masked_batch=True,
                 clip_rewards=False, total_steps=150_000, random_state=None):
        self.algorithm = algorithm
        self.head_mode = head_mode
        self.bootstrap_variant = bootstrap_variant
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.shared_output_bias = shared_output_bias
        self.gamma = gamma
        self.minibatch_size = minibatch_size
        self.update_frequency = update_frequency
        self.target_interval = target_interval
        self.replay_capacity = replay_capacity
        self.replay_start_size = replay_start_size
        self.buffer_mode = buffer_mode
        self.disjoint_minibatches = disjoint_minibatches
        self.epsilon_initial = epsilon_initial
        self.epsilon_final = epsilon_final
        self.epsilon_anneal_steps = epsilon_anneal_steps
        self.eval_epsilon = eval_epsilon
        self.identical_init = identical_init
        self.adam_step_size = adam_step_size
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.tie_break = tie_break
        self.masked_batch = masked_batch
        self.clip_rewards = clip_rewards
        self.total_steps = total_steps
        self.random_state = random_state

    def make_config(self):
        names = {f.name for f in fields(AgentConfig)}
        return AgentConfig(**{k: v for k, v in self.get_params().items() if k in names})

    @classmethod
    def from_config(cls, config, **extra):
        return cls(**config.to_dict(), **extra)

    def initialize(self, env):
        """Build fresh parameters, optimizer, buffer and RNG streams for ``env``."""
        self.config_ = self.make_config()
        self.state_ = init_state(self.config_, env.observation_dim, env.n_actions,
                                 make_streams(self.random_state))
        self.n_actions_ = env.n_actions
        self.n_features_in_ = env.observation_dim
        return self

    def fit(self, env, y=None, hooks=()):
        """Train on ``env`` from scratch. ``y`` is ignored."""
        self.initialize(env)
        train(self.config_, self.state_, env, self.total_steps, hooks)
        return self

    def partial_fit(self, env, n_steps, hooks=()):
        """Continue training the current state for ``n_steps`` more env steps."""
        if not hasattr(self, "state_"):
            self.initialize(env)
        train(self.config_, self.state_, env, n_steps, hooks)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "state_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, agent was fitted with {self.n_features_in_}")
        return X

    def decision_function(self, X):
        """Head-averaged online Q-values, shape ``(n_samples, n_actions)``."""
        return action_values(self.state_.online, self._check_X(X))

    def q_heads(self, X):
        """List of per-head online Q-value arrays."""
        return nn.forward(self.state_.online, self._check_X(X))

    def predict(self, X):
        """Greedy actions (lowest-index ties)."""
        return np.argmax(self.decision_function(X), axis=1)

    # evaluation protocol used by ddql.evaluation
    def act(self, obs, epsilon, rng):
        scores = action_values(self.state_.online, obs)[0]
        a = epsilon_greedy(scores, epsilon, rng, self.config_.tie_break)
        return a, float(scores[a])

    def bootstrap_value(self, obs):
        return float(np.max(action_values(self.state_.online, obs)[0]))

    def save(self, path):
        check_is_fitted(self, "state_")
        save_agent(path, self.config_, self.state_)

    @classmethod
    def load(cls, path):
        config, state = load_agent(path)
        agent = cls.from_config(config)
        agent.config_ = config
        agent.state_ = state
        agent.n_actions_ = state.online.spec.n_actions
        agent.n_features_in_ = state.online.spec.input_dim
        return agent
