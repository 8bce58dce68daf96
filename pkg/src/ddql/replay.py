"""Experience replay: ring buffers, the double-buffer split, and masked batches."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import check_positive_int


class InsufficientTransitionsError(ValueError):
    """A buffer holds fewer transitions than the requested minibatch size."""


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool = False
    truncated: bool = False

    def __post_init__(self):
        if self.terminal and self.truncated:
            raise ValueError("a transition cannot be both terminal and truncated")


class Batch(NamedTuple):
    """Column-wise minibatch; ``ids`` are insertion counters."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    truncated: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions, ids=None):
        ts = list(transitions)
        return cls(
            np.array([t.state for t in ts], dtype=np.float64),
            np.array([t.action for t in ts], dtype=np.int64),
            np.array([t.reward for t in ts], dtype=np.float64),
            np.array([t.next_state for t in ts], dtype=np.float64),
            np.array([t.terminal for t in ts], dtype=bool),
            np.array([t.truncated for t in ts], dtype=bool),
            np.arange(len(ts), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64),
        )

    def transitions(self):
        return [Transition(s, int(a), float(r), s2, bool(d), bool(tr))
                for s, a, r, s2, d, tr in zip(self.states, self.actions, self.rewards,
                                              self.next_states, self.terminals, self.truncated)]


def concat_batches(b1, b2):
    return Batch(*(np.concatenate([x, y]) for x, y in zip(b1, b2)))


class ReplayBuffer:
    """Fixed-capacity FIFO ring buffer backed by preallocated arrays."""

    def __init__(self, capacity):
        self.capacity = check_positive_int(capacity, "capacity")
        self.size = 0
        self.cursor = 0
        self._cols = None

    def __len__(self):
        return self.size

    def _allocate(self, state_dim):
        cap = self.capacity
        self._cols = Batch(
            np.zeros((cap, state_dim)), np.zeros(cap, dtype=np.int64), np.zeros(cap),
            np.zeros((cap, state_dim)), np.zeros(cap, dtype=bool), np.zeros(cap, dtype=bool),
            np.zeros(cap, dtype=np.int64),
        )

    def push(self, t, ident):
        state = np.asarray(t.state, dtype=np.float64)
        if self._cols is None:
            self._allocate(state.shape[0])
        i = self.cursor
        c = self._cols
        c.states[i] = state
        c.actions[i] = t.action
        c.rewards[i] = t.reward
        c.next_states[i] = t.next_state
        c.terminals[i] = t.terminal
        c.truncated[i] = t.truncated
        c.ids[i] = ident
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self):
        """Storage slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity

    def gather(self, slots):
        return Batch(*(col[slots] for col in self._cols))

    def contents(self):
        """All stored transitions, oldest first."""
        if self._cols is None:
            return Batch.from_transitions([])
        return self.gather(self._order())

    def sample(self, n, rng, replace=False):
        """Uniform minibatch of ``n`` transitions (without replacement by default)."""
        if self.size < n or self.size == 0:
            raise InsufficientTransitionsError(f"buffer holds {self.size} transitions, need {n}")
        slots = rng.choice(self.size, size=n, replace=replace)
        return self.gather(slots)


class BufferStrategy:
    """Single shared buffer, or two half-capacity buffers fed by a coin flip.

    ``disjoint_minibatches`` (single mode only) draws both minibatches from
    one without-replacement sample so they share no transition.
    """

    def __init__(self, capacity, mode="single", disjoint_minibatches=False):
        capacity = check_positive_int(capacity, "capacity")
        if mode not in ("single", "double"):
            raise ValueError(f"mode must be 'single' or 'double', got {mode!r}")
        self.mode = mode
        self.capacity = capacity
        self.disjoint_minibatches = disjoint_minibatches
        if mode == "single":
            self.buffers = [ReplayBuffer(capacity)]
        else:
            if capacity < 2:
                raise ValueError("double mode needs capacity >= 2")
            self.buffers = [ReplayBuffer(capacity // 2), ReplayBuffer(capacity // 2)]
        self.n_pushed = 0

    def __len__(self):
        return sum(len(b) for b in self.buffers)

    def min_size(self):
        return min(len(b) for b in self.buffers)


def push(strategy, t, rng):
    """Store ``t``; double mode routes it to either buffer with probability 1/2."""
    ident = strategy.n_pushed
    if strategy.mode == "single":
        strategy.buffers[0].push(t, ident)
    else:
        strategy.buffers[int(rng.random() < 0.5)].push(t, ident)
    strategy.n_pushed += 1
    return strategy


def sample_minibatch(strategy, n, rng):
    """One minibatch from the single buffer (baseline agents)."""
    if strategy.mode != "single":
        raise ValueError("single-minibatch sampling needs a single-buffer strategy")
    return strategy.buffers[0].sample(n, rng)


def sample_two_minibatches(strategy, n, rng):
    """Draw ``(B1, B2)``.

    Single mode: two independent uniform draws from the shared buffer, each
    without replacement internally (the two may overlap). Double mode: ``B1``
    from buffer 1 and ``B2`` from buffer 2.
    """
    check_positive_int(n, "batch size")
    if strategy.mode == "double":
        return strategy.buffers[0].sample(n, rng), strategy.buffers[1].sample(n, rng)
    buf = strategy.buffers[0]
    if strategy.disjoint_minibatches:
        both = buf.sample(2 * n, rng)
        return Batch(*(c[:n] for c in both)), Batch(*(c[n:] for c in both))
    return buf.sample(n, rng), buf.sample(n, rng)


class MaskedBatch(NamedTuple):
    """``B1`` stacked on ``B2`` with per-row head masks.

    ``head_mask[i, k]`` is True when row ``i`` trains head/network ``k``.
    ``loss_scale`` restores ``L1 + L2`` from the mean over ``2n`` rows.
    """

    batch: Batch
    head_mask: np.ndarray
    loss_scale: float


def build_masked_batch(b1, b2):
    n = len(b1)
    if len(b2) != n:
        raise ValueError(f"minibatch sizes differ: {n} vs {len(b2)}")
    mask = np.zeros((2 * n, 2), dtype=bool)
    mask[:n, 0] = True
    mask[n:, 1] = True
    return MaskedBatch(concat_batches(b1, b2), mask, 2.0)


def masked_mse(predictions, targets, head_mask, loss_scale=2.0):
    """Loss and prediction-gradients for a masked combined batch.

    ``predictions`` and ``targets`` have shape ``(2n, 2)``: column ``k`` holds
    head ``k``'s prediction/target for every row. Masked-out entries are
    zeroed before the loss, so they contribute nothing. The loss is the mean
    over rows of the per-row squared error, times ``loss_scale``.
    """
    m = head_mask.astype(np.float64)
    pred = np.asarray(predictions) * m
    y = np.asarray(targets) * m
    rows = pred.shape[0]
    diff = pred - y
    loss = loss_scale * float(np.sum(diff * diff)) / rows
    grad = loss_scale * 2.0 * diff / rows
    return loss, grad


def dump_buffer(buffer, fh):
    """Write buffer contents as tab-separated rows, oldest first."""
    b = buffer.contents()
    fh.write("id\taction\treward\tterminal\ttruncated\tstate\tnext_state\n")
    for i in range(len(b)):
        state = " ".join(repr(float(x)) for x in b.states[i])
        nxt = " ".join(repr(float(x)) for x in b.next_states[i])
        fh.write(f"{b.ids[i]}\t{b.actions[i]}\t{float(b.rewards[i])!r}\t{int(b.terminals[i])}\t"
                 f"{int(b.truncated[i])}\t{state}\t{nxt}\n")
