"""Small dense Q-networks with hand-written backpropagation and Adam.

Three layouts are supported:

``single``
    one MLP trunk and one output head (DQN, Double DQN).
``dual_head``
    one shared trunk feeding two output heads (DH-DDQL).
``dual_network``
    two independent MLPs (DN-DDQL).

Parameters live in :class:`NetworkParams`, an ordered mapping from names to
float64 arrays. The first dotted component of a name is its owner tag:
``trunk``, ``head1``, ``head2``, ``net1`` or ``net2``.
"""

import functools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_positive_int

HEAD_MODES = ("single", "dual_head", "dual_network")
ACTIVATIONS = ("relu", "tanh")

# Adam settings used for the Atari experiments (Rainbow setting with MSE)
PAPER_ADAM = dict(step_size=6.25e-5, beta1=0.9, beta2=0.999, eps=1.5e-4)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Shape description of a Q-network.

    ``shared_output_bias=True`` gives each output layer one bias scalar
    shared by every action instead of a per-action bias vector.
    """

    input_dim: int
    n_actions: int
    hidden_sizes: tuple = (64, 64)
    activation: str = "relu"
    head_mode: str = "single"
    shared_output_bias: bool = False

    def __post_init__(self):
        check_positive_int(self.input_dim, "input_dim")
        check_positive_int(self.n_actions, "n_actions")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        for h in self.hidden_sizes:
            check_positive_int(h, "hidden size")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")

    @property
    def n_heads(self):
        return 1 if self.head_mode == "single" else 2

    def towers(self):
        """``[(trunk_prefix, [head_prefix, ...]), ...]`` in output order."""
        return _towers(self.head_mode)

    def param_shapes(self):
        return _param_shapes(self)

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "hidden_sizes": tuple(d["hidden_sizes"])})


@functools.lru_cache(maxsize=None)
def _towers(head_mode):
    if head_mode == "single":
        return (("trunk", ("head1",)),)
    if head_mode == "dual_head":
        return (("trunk", ("head1", "head2")),)
    return (("net1", ("net1.out",)), ("net2", ("net2.out",)))


@functools.lru_cache(maxsize=None)
def _param_shapes(spec):
    shapes = {}
    bias_shape = (1,) if spec.shared_output_bias else (spec.n_actions,)
    for trunk, heads in spec.towers():
        fan_in = spec.input_dim
        for i, width in enumerate(spec.hidden_sizes):
            shapes[f"{trunk}.{i}.W"] = (fan_in, width)
            shapes[f"{trunk}.{i}.b"] = (width,)
            fan_in = width
        for head in heads:
            shapes[f"{head}.W"] = (fan_in, spec.n_actions)
            shapes[f"{head}.b"] = bias_shape
    return shapes


def owner(name):
    """Owner tag of a parameter name (``trunk``, ``head1``, ``net2`` ...)."""
    return name.split(".", 1)[0]


class NetworkParams:
    """Ordered collection of named parameter arrays for one architecture."""

    def __init__(self, spec, arrays):
        self.spec = spec
        self.arrays = dict(arrays)
        self.audit()

    def audit(self):
        """Check that names, shapes and values match the spec."""
        expected = self.spec.param_shapes()
        if list(self.arrays) != list(expected):
            raise ValueError(f"parameter names {list(self.arrays)} do not match layout {list(expected)}")
        for name, shape in expected.items():
            arr = self.arrays[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"{name} contains non-finite values")

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self):
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self):
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    @classmethod
    def from_flat(cls, spec, vector):
        vector = np.asarray(vector, dtype=np.float64)
        arrays, pos = {}, 0
        for name, shape in spec.param_shapes().items():
            size = int(np.prod(shape))
            arrays[name] = vector[pos:pos + size].reshape(shape).copy()
            pos += size
        if pos != vector.size:
            raise ValueError(f"flat vector has {vector.size} entries, layout needs {pos}")
        return cls(spec, arrays)

    def bitwise_equal(self, other, owners=None):
        names = [n for n in self.arrays if owners is None or owner(n) in owners]
        return all(np.array_equal(self.arrays[n], other.arrays[n]) for n in names)

    @property
    def size(self):
        return sum(v.size for v in self.arrays.values())


def init_params(spec, rng, identical=True):
    """Draw fresh parameters, uniform in ``±1/sqrt(fan_in)``.

    With ``identical=True`` the second head (``dual_head``) or the second
    network (``dual_network``) is a bitwise copy of the first; otherwise it is
    drawn independently from the same stream.
    """
    arrays = {}
    for name, shape in spec.param_shapes().items():
        tag = owner(name)
        if identical and tag in ("head2", "net2"):
            twin = name.replace("head2", "head1", 1) if tag == "head2" else name.replace("net2", "net1", 1)
            arrays[name] = arrays[twin].copy()
            continue
        fan_in = _fan_in(spec, name)
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return NetworkParams(spec, arrays)


def _fan_in(spec, name):
    parts = name.split(".")
    if parts[-2].isdigit():
        i = int(parts[-2])
        return spec.input_dim if i == 0 else spec.hidden_sizes[i - 1]
    return spec.hidden_sizes[-1] if spec.hidden_sizes else spec.input_dim


# ---------------------------------------------------------------------------
# Forward / backward


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def forward(params, states, return_cache=False):
    """Q-values for a batch of states.

    Returns a list with one ``(batch, n_actions)`` array per head: one entry
    for ``single``, two for the dual modes. With ``return_cache=True`` also
    returns the activations needed by :func:`backward`.
    """
    spec = params.spec
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"states must have shape (batch, {spec.input_dim}), got {x.shape}")
    a = params.arrays
    n_hidden = len(spec.hidden_sizes)
    outputs = []
    cache = {"x": x, "towers": []}
    for trunk, heads in spec.towers():
        h = x
        acts = [x]
        for i in range(n_hidden):
            h = _act(h @ a[f"{trunk}.{i}.W"] + a[f"{trunk}.{i}.b"], spec.activation)
            acts.append(h)
        for head in heads:
            outputs.append(h @ a[f"{head}.W"] + a[f"{head}.b"])
        cache["towers"].append(acts)
    if return_cache:
        return outputs, cache
    return outputs


def backward(params, cache, output_grads):
    """Gradients of a scalar loss w.r.t. every parameter.

    ``output_grads`` holds one ``(batch, n_actions)`` array (or ``None`` for
    zero) per head, in :func:`forward` output order. In ``dual_head`` mode
    both heads' contributions accumulate into the shared trunk.
    """
    if cache is None:
        raise ValueError("backward needs the cache from forward(..., return_cache=True)")
    spec = params.spec
    a = params.arrays
    n_hidden = len(spec.hidden_sizes)
    grads = {}
    batch = cache["x"].shape[0]
    head_iter = iter(output_grads)
    for (trunk, heads), acts in zip(spec.towers(), cache["towers"]):
        top = acts[-1]
        dh = np.zeros_like(top)
        for head in heads:
            g = next(head_iter)
            if g is None:
                g = np.zeros((batch, spec.n_actions))
            grads[f"{head}.W"] = top.T @ g
            bias = g.sum(axis=0)
            grads[f"{head}.b"] = bias.sum(keepdims=True) if spec.shared_output_bias else bias
            dh += g @ a[f"{head}.W"].T
        for i in reversed(range(n_hidden)):
            out = acts[i + 1]
            dz = dh * (out > 0) if spec.activation == "relu" else dh * (1.0 - out * out)
            grads[f"{trunk}.{i}.W"] = acts[i].T @ dz
            grads[f"{trunk}.{i}.b"] = dz.sum(axis=0)
            if i > 0:
                dh = dz @ a[f"{trunk}.{i}.W"].T
    return {name: grads[name] for name in spec.param_shapes()}


def mse_loss_and_grad(predictions, targets):
    """Mean squared error and its gradient with respect to the predictions.

    Targets are constants: no gradient flows into them.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: predictions {pred.shape} vs targets {y.shape}")
    n = pred.size
    if n == 0:
        raise ValueError("empty batch")
    diff = pred - y
    return float(np.mean(diff * diff)), (2.0 / n) * diff


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moments plus step counter for bias-corrected Adam."""

    m: dict
    v: dict
    t: int = 0
    step_size: float = PAPER_ADAM["step_size"]
    beta1: float = PAPER_ADAM["beta1"]
    beta2: float = PAPER_ADAM["beta2"]
    eps: float = PAPER_ADAM["eps"]
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params, **hyper):
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, **hyper)

    def hyperparameters(self):
        return dict(step_size=self.step_size, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_arrays = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_arrays[name] = p - state.step_size * (m / c1) / (np.sqrt(v / c2) + state.eps)
    new_params = NetworkParams(params.spec, new_arrays)
    return new_params, AdamState(new_m, new_v, t, state.step_size, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# Checkpoints
#
# A checkpoint is an ``.npz`` archive holding a JSON header under ``header``
# and one flat float64 vector per named parameter set (``params/<name>``),
# plus Adam moments (``adam_m/<name>``, ``adam_v/<name>``) when present. The
# flat layout is NetworkParams.flat(), i.e. parameters in layout order, each
# raveled row-major.


def save_checkpoint(path, param_sets, header=None, adam=None):
    """Write named parameter sets (and optional Adam states) to ``path``."""
    header = dict(header or {})
    specs = {name: p.spec.to_dict() for name, p in param_sets.items()}
    header["specs"] = specs
    payload = {f"params/{name}": p.flat() for name, p in param_sets.items()}
    if adam:
        header["adam"] = {}
        for name, st in adam.items():
            spec = param_sets[name].spec
            payload[f"adam_m/{name}"] = NetworkParams(spec, st.m).flat()
            payload[f"adam_v/{name}"] = NetworkParams(spec, st.v).flat()
            header["adam"][name] = {"t": st.t, **st.hyperparameters()}
    payload["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(header, param_sets, adam)``."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        param_sets, adam = {}, {}
        for name, spec_d in header["specs"].items():
            spec = ArchitectureSpec.from_dict(spec_d)
            param_sets[name] = NetworkParams.from_flat(spec, data[f"params/{name}"])
        for name, meta in header.get("adam", {}).items():
            spec = param_sets[name].spec
            m = NetworkParams.from_flat(spec, data[f"adam_m/{name}"]).arrays
            v = NetworkParams.from_flat(spec, data[f"adam_v/{name}"]).arrays
            adam[name] = AdamState(m, v, meta["t"], meta["step_size"], meta["beta1"], meta["beta2"], meta["eps"])
    return header, param_sets, adam
