"""Exact q* and uniform-policy q tables for the built-in environments."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tabular
from ..envs import make_env, to_tabular
from .runner import format_float


@dataclass
class OracleTables:
    mdp: tabular.TabularMdp
    q_star: np.ndarray
    q_uniform: np.ndarray

    def labels(self):
        if self.mdp.state_labels is not None:
            return list(self.mdp.state_labels)
        return [str(s) for s in range(self.mdp.n_states)]


def uniform_policy(mdp):
    """Uniform over each state's allowed actions."""
    mask = mdp.action_mask.astype(np.float64)
    return mask / mask.sum(axis=1, keepdims=True)


def oracle_tables(env_name, gamma=0.99, sticky_prob=0.0, **params):
    env = make_env(env_name, sticky_prob=sticky_prob, **params)
    mdp = to_tabular(env, gamma)
    q_star = tabular.value_iteration(mdp)
    q_uniform = tabular.policy_q_evaluation(mdp, uniform_policy(mdp))
    return OracleTables(mdp, q_star, q_uniform)


def format_tables(tables, precision=6):
    mdp = tables.mdp
    labels = tables.labels()
    width = max(8, max(len(lb) for lb in labels) + 1)
    cols = "".join(f"{'a' + str(a):>{precision + 8}}" for a in range(mdp.n_actions))
    out = []
    for title, q in (("q* (optimal)", tables.q_star), ("q_pi (uniform random policy)", tables.q_uniform)):
        out.append(f"{title}, gamma={mdp.gamma}")
        out.append(f"{'state':<{width}}{cols}")
        for s, lb in enumerate(labels):
            cells = "".join(
                f"{q[s, a]:>{precision + 8}.{precision}f}" if mdp.action_mask[s, a] else f"{'-':>{precision + 8}}"
                for a in range(mdp.n_actions))
            out.append(f"{lb:<{width}}{cells}")
        out.append("")
    return "\n".join(out)


def write_tables_csv(tables, path):
    mdp = tables.mdp
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "label", "action", "valid", "q_star", "q_uniform"])
        for s, lb in enumerate(tables.labels()):
            for a in range(mdp.n_actions):
                w.writerow([s, lb, a, int(mdp.action_mask[s, a]),
                            format_float(tables.q_star[s, a]), format_float(tables.q_uniform[s, a])])
    return Path(path)
