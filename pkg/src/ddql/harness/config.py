"""Experiment configuration files.

A config is a flat text file of ``section.key = value`` lines; ``#`` starts
a comment. Values are typed by the schema below, so a misspelled key or a
malformed value fails before any run starts. A top-level ``preset = name``
line first loads a bundled preset (``desk`` or ``paper-fullscale``) or
another config file, then applies the remaining lines on top.

Example::

    preset = desk
    experiment.id = dqn-grid
    agent.algorithm = dqn
    experiment.seeds = 0 1 2
"""

import os
import typing
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from ..agents import AgentConfig
from ..envs import ENV_NAMES, make_env

OUTPUT_ROOT_VAR = "DDQL_OUTPUT_ROOT"
PRESETS = ("desk", "paper-fullscale")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Value parsers


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text):
    return int(text.replace("_", ""))


def _float(text):
    return float(text.replace("_", ""))


def _int_list(text):
    return tuple(_int(t) for t in text.replace(",", " ").split())


def _optional(parse):
    def parser(text):
        if text.lower() in ("none", "auto", ""):
            return None
        return parse(text)
    return parser


def _str(text):
    if not text:
        raise ValueError("empty string")
    return text


_BY_TYPE = {bool: _bool, int: _int, float: _float, str: _str, tuple: _int_list}


def _parser_for(annotation):
    args = typing.get_args(annotation)
    if typing.get_origin(annotation) is typing.Union and type(None) in args:
        inner = next(a for a in args if a is not type(None))
        return _optional(_BY_TYPE[inner])
    return _BY_TYPE[annotation]


EXPERIMENT_SCHEMA = {
    "id": _str,
    "seeds": _int_list,
    "output_dir": _str,
    "concurrency": _int,
    "total_steps": _int,
}
EVAL_SCHEMA = {"interval": _int, "phase_length": _int}
ENV_COMMON_SCHEMA = {
    "name": _str, "max_steps": _optional(_int), "sticky_prob": _float,
    "clip_rewards": _bool, "seed": _optional(_int),
}
ENV_PARAM_SCHEMA = {
    "maxbias": {"n_arms": _int, "arm_mean": _float, "arm_std": _float},
    "gridworld": {
        "width": _int, "height": _int, "start": _int_list, "goal": _optional(_int_list),
        "step_reward": _float, "goal_reward": _float, "goal_noise_std": _float,
        "step_noise_std": _float, "slip_prob": _float, "wall_noise_std": _float,
    },
}
AGENT_SCHEMA = {f.name: _parser_for(f.type) for f in fields(AgentConfig)}


# ---------------------------------------------------------------------------
# Parsing


def parse_lines(text, source="<config>"):
    """``(preset or None, [(key, raw value, line number)])`` from config text."""
    preset = None
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if entries or preset is not None:
                raise ConfigError(f"{source}:{lineno}: 'preset' must be the first setting")
            preset = value
            continue
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} needs a section (e.g. agent.{key})")
        entries.append((key, value, lineno))
    return preset, entries


def preset_text(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; bundled presets are {PRESETS}")
    return resources.files("ddql.harness").joinpath("presets").joinpath(f"{name}.cfg").read_text()


def _resolve_raw(text, source, base_dir, depth=0):
    """Flatten preset inheritance into an ordered ``{key: (value, where)}``."""
    if depth > 8:
        raise ConfigError("preset chain too deep")
    preset, entries = parse_lines(text, source)
    merged = {}
    if preset is not None:
        candidate = Path(base_dir, preset) if base_dir is not None else None
        if preset in PRESETS:
            merged = _resolve_raw(preset_text(preset), f"preset:{preset}", None, depth + 1)
        elif candidate is not None and candidate.is_file():
            merged = _resolve_raw(candidate.read_text(), str(candidate), candidate.parent, depth + 1)
        else:
            raise ConfigError(f"{source}: unknown preset {preset!r}")
    for key, value, lineno in entries:
        merged[key] = (value, f"{source}:{lineno}")
    return merged


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment: one run per seed of one agent on one environment."""

    experiment_id: str
    seeds: tuple
    env_name: str
    env_params: dict
    max_steps: typing.Optional[int]
    sticky_prob: float
    agent: AgentConfig
    total_steps: int
    eval_interval: int
    eval_phase_length: int
    output_dir: str = "runs"
    concurrency: int = 1
    clip_rewards: bool = False
    env_seed: typing.Optional[int] = None
    settings: dict = field(default_factory=dict, compare=False, repr=False)

    def make_env(self):
        return make_env(self.env_name, sticky_prob=self.sticky_prob, max_steps=self.max_steps,
                        clip_rewards=self.clip_rewards, **self.env_params)

    @property
    def n_phases(self):
        return self.total_steps // self.eval_interval

    def run_id(self, seed):
        return f"{self.experiment_id}-seed{seed}"

    def output_path(self, root=None):
        """Directory holding this experiment's CSV and checkpoint files."""
        return resolve_output_dir(self.output_dir, root) / self.experiment_id

    def with_seed_offset(self, offset):
        from dataclasses import replace
        return replace(self, seeds=tuple(s + offset for s in self.seeds))

    def to_text(self):
        """Canonical config text (every setting, no preset line)."""
        return "".join(f"{k} = {v}\n" for k, v in self.settings.items())


def output_root(root=None):
    if root is not None:
        return Path(root)
    return Path(os.environ.get(OUTPUT_ROOT_VAR, "."))


def resolve_output_dir(output_dir, root=None):
    p = Path(output_dir)
    return p if p.is_absolute() else output_root(root) / p


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def build_config(raw):
    """Validate a flattened ``{key: (value, where)}`` mapping."""
    sections = {"experiment": {}, "env": {}, "agent": {}, "eval": {}}
    env_name = raw.get("env.name", (None,))[0]
    if env_name not in ENV_NAMES:
        raise ConfigError(f"env.name must be one of {ENV_NAMES}, got {env_name!r}")
    schemas = {
        "experiment": EXPERIMENT_SCHEMA,
        "env": {**ENV_COMMON_SCHEMA, **ENV_PARAM_SCHEMA[env_name]},
        "agent": AGENT_SCHEMA,
        "eval": EVAL_SCHEMA,
    }
    for key, (value, where) in raw.items():
        section, _, name = key.partition(".")
        if section not in schemas or name not in schemas[section]:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            sections[section][name] = schemas[section][name](value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    exp, env, ev = sections["experiment"], sections["env"], sections["eval"]
    for key in ("id", "seeds", "total_steps"):
        if key not in exp:
            raise ConfigError(f"missing required key experiment.{key}")
    for key in ("interval", "phase_length"):
        if key not in ev:
            raise ConfigError(f"missing required key eval.{key}")
    try:
        agent = AgentConfig(**sections["agent"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid agent settings: {exc}") from None
    seeds = exp["seeds"]
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("experiment.seeds must be a non-empty list of distinct integers")
    if exp["total_steps"] < 1 or ev["interval"] < 1 or ev["phase_length"] < 1:
        raise ConfigError("total_steps, eval.interval and eval.phase_length must be >= 1")
    if exp.get("concurrency", 1) < 1:
        raise ConfigError("experiment.concurrency must be >= 1")
    params = {k: v for k, v in env.items() if k not in ENV_COMMON_SCHEMA}
    cfg = ExperimentConfig(
        experiment_id=exp["id"],
        seeds=seeds,
        env_name=env_name,
        env_params=params,
        max_steps=env.get("max_steps"),
        sticky_prob=env.get("sticky_prob", 0.0),
        agent=agent,
        total_steps=exp["total_steps"],
        eval_interval=ev["interval"],
        eval_phase_length=ev["phase_length"],
        output_dir=exp.get("output_dir", "runs"),
        concurrency=exp.get("concurrency", 1),
        clip_rewards=env.get("clip_rewards", False),
        env_seed=env.get("seed"),
        settings={k: _format(sections[k.split(".")[0]][k.split(".", 1)[1]]) for k in raw},
    )
    try:
        env_obj = cfg.make_env()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid env settings: {exc}") from None
    if agent.replay_capacity < agent.minibatch_size:
        raise ConfigError("agent.replay_capacity must hold at least one minibatch")
    del env_obj
    return cfg


def loads(text, source="<string>", base_dir=None):
    return build_config(_resolve_raw(text, source, base_dir))


def load(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text, str(path), path.parent)


def load_preset(name, **overrides):
    """A bundled preset with ``section.key`` overrides given as ``section__key=value``."""
    raw = _resolve_raw(preset_text(name), f"preset:{name}", None)
    for key, value in overrides.items():
        raw[key.replace("__", ".")] = (_format(value) if not isinstance(value, str) else value, "override")
    return build_config(raw)
