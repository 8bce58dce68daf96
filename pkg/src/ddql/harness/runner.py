"""Multi-seed experiment runs with CSV metrics and final checkpoints."""

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..agents import DeepQAgent, Hook, epsilon_at
from ..evaluation import run_evaluation_phase
from . import config as config_mod

METRIC_COLUMNS = (
    "run_id", "experiment_id", "algorithm", "variant", "env", "seed", "phase_index", "env_steps",
    "mean_eval_return", "overestimation", "q_hat", "g_hat", "epsilon", "gradient_updates",
    "wallclock_seconds",
)
FLOAT_COLUMNS = ("mean_eval_return", "overestimation", "q_hat", "g_hat", "epsilon", "wallclock_seconds")
INT_COLUMNS = ("seed", "phase_index", "env_steps", "gradient_updates")
ABORT_SUFFIX = ".ABORTED"


def format_float(x):
    """17 significant digits, so reruns are byte-comparable."""
    return format(float(x), ".17g")


def variant_label(agent_config):
    """Short algorithm label used in reports: dqn, double_dqn, dh_ddql or dn_ddql."""
    if agent_config.algorithm != "ddql":
        return agent_config.algorithm
    return "dh_ddql" if agent_config.head_mode == "dual_head" else "dn_ddql"


@dataclass
class RunResult:
    run_id: str
    seed: int
    csv_path: Path
    checkpoint_path: Path
    n_rows: int
    aborted: bool = False
    message: str = ""


@dataclass
class ExperimentResult:
    experiment_id: str
    output_dir: Path
    runs: list

    @property
    def ok(self):
        return not any(r.aborted for r in self.runs)


class _MetricsWriter:
    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRIC_COLUMNS)
        self._fh.flush()
        self.n_rows = 0

    def write(self, row):
        self._writer.writerow(
            format_float(row[c]) if c in FLOAT_COLUMNS else row[c] for c in METRIC_COLUMNS)
        self._fh.flush()
        self.n_rows += 1

    def close(self):
        self._fh.close()


def run_single(cfg, seed, out_dir):
    """Train one seed, evaluating every ``cfg.eval_interval`` env steps."""
    out_dir = Path(out_dir)
    run_id = cfg.run_id(seed)
    csv_path = out_dir / f"{run_id}.csv"
    ckpt_path = out_dir / f"{run_id}.npz"
    abort_path = out_dir / f"{run_id}{ABORT_SUFFIX}"
    if abort_path.exists():
        abort_path.unlink()
    env = cfg.make_env()
    eval_env = cfg.make_env()
    agent = DeepQAgent.from_config(cfg.agent, total_steps=cfg.total_steps, random_state=seed)
    agent.initialize(env)
    if cfg.env_seed is not None:
        # a fixed env seed pins environment randomness while other streams follow the run seed
        agent.state_.rngs["env"] = np.random.default_rng([cfg.env_seed, seed])
    writer = _MetricsWriter(csv_path)
    start = time.perf_counter()
    phase = [0]
    base = {
        "run_id": run_id, "experiment_id": cfg.experiment_id, "algorithm": variant_label(cfg.agent),
        "variant": cfg.agent.bootstrap_variant, "env": cfg.env_name, "seed": seed,
    }

    def evaluate(config, state):
        rep = run_evaluation_phase(agent, eval_env, config.eval_epsilon, cfg.eval_phase_length,
                                   state.rngs["eval"], config.gamma, phase[0], state.env_steps)
        writer.write({
            **base,
            "phase_index": phase[0],
            "env_steps": state.env_steps,
            "mean_eval_return": rep.mean_return,
            "overestimation": rep.overestimation,
            "q_hat": rep.mean_predicted_q,
            "g_hat": rep.mean_empirical_return,
            "epsilon": epsilon_at(config.schedule, state.env_steps),
            "gradient_updates": state.gradient_updates,
            "wallclock_seconds": time.perf_counter() - start,
        })
        phase[0] += 1

    try:
        agent.partial_fit(env, cfg.total_steps, hooks=[Hook(cfg.eval_interval, evaluate)])
    except FloatingPointError as exc:
        writer.close()
        steps = agent.state_.env_steps if hasattr(agent, "state_") else 0
        abort_path.write_text(f"run {run_id} aborted at env step {steps}: {exc}\n")
        return RunResult(run_id, seed, csv_path, ckpt_path, writer.n_rows, True, str(exc))
    writer.close()
    agent.save(ckpt_path)
    return RunResult(run_id, seed, csv_path, ckpt_path, writer.n_rows)


def run_experiment(cfg, root=None, seed_offset=0, concurrency=None):
    """Run every seed of an experiment; ``cfg`` is an ExperimentConfig or a path.

    Each run writes ``<run_id>.csv`` and ``<run_id>.npz`` into
    ``<output root>/<output_dir>/<experiment id>/``; a run that hits a
    non-finite loss keeps its partial CSV and gets a ``.ABORTED`` marker
    while the other runs carry on.
    """
    if not isinstance(cfg, config_mod.ExperimentConfig):
        cfg = config_mod.load(cfg)
    if seed_offset:
        cfg = cfg.with_seed_offset(seed_offset)
    out_dir = cfg.output_path(root)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "experiment.cfg").write_text(cfg.to_text())
    workers = min(concurrency or cfg.concurrency, len(cfg.seeds))
    if workers <= 1:
        runs = [run_single(cfg, s, out_dir) for s in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_single, cfg, s, out_dir) for s in cfg.seeds]
            runs = [f.result() for f in futures]
    return ExperimentResult(cfg.experiment_id, out_dir, runs)


# ---------------------------------------------------------------------------
# Reading results back


def read_metrics(csv_path):
    """Columns of one run's CSV as numpy arrays (string columns stay str)."""
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{csv_path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    out = {}
    for c in METRIC_COLUMNS:
        vals = [r[c] for r in rows]
        if c in FLOAT_COLUMNS:
            out[c] = np.array(vals, dtype=np.float64)
        elif c in INT_COLUMNS:
            out[c] = np.array(vals, dtype=np.int64)
        else:
            out[c] = np.array(vals, dtype=object)
    return out


def load_experiment(exp_dir):
    """``{run_id: columns}`` for every run CSV in an experiment directory."""
    exp_dir = Path(exp_dir)
    if not exp_dir.is_dir():
        raise FileNotFoundError(f"no experiment directory {exp_dir}")
    runs = {}
    for path in sorted(exp_dir.glob("*.csv")):
        cols = read_metrics(path)
        if len(cols["run_id"]):
            runs[cols["run_id"][0]] = cols
    if not runs:
        raise FileNotFoundError(f"no run CSVs in {exp_dir}")
    return runs
