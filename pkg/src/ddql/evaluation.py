"""Evaluation phases, the overestimation estimator, and aggregate score metrics.

Agents are evaluated through a small protocol: ``agent.act(obs, epsilon, rng)``
returns ``(action, predicted_q)`` where the prediction is the value the agent
assigned to the action it executed (the head average for two-headed agents),
and ``agent.bootstrap_value(obs)`` returns the greedy value used to bootstrap
episodes cut by the environment time limit.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from ._validation import as_generator, check_positive_int

# ---------------------------------------------------------------------------
# Trajectories and the overestimation estimator


@dataclass
class Trajectory:
    """One completed evaluation episode.

    ``rewards[t]`` follows action ``t``; ``predictions[t]`` is the predicted
    value of that action. ``bootstrap_value`` is set only for truncated
    episodes.
    """

    rewards: np.ndarray
    predictions: np.ndarray
    truncated: bool = False
    bootstrap_value: Optional[float] = None

    def __len__(self):
        return len(self.rewards)

    @property
    def score(self):
        return float(np.sum(self.rewards))


def discounted_returns(rewards, gamma, bootstrap_value=None, truncated=None):
    """Discounted return from every position of a completed episode.

    ``G_t = sum_{j >= t+1} gamma**(j-t-1) r_j``, plus
    ``gamma**(T-t) * bootstrap_value`` when the episode was truncated.

    Parameters
    ----------
    rewards : array_like, shape (T,)
    gamma : float
    bootstrap_value : float, optional
        Greedy value at the final state of a truncated episode.
    truncated : bool, optional
        Defaults to ``bootstrap_value is not None``. A bootstrap value for a
        terminated episode is an error.

    Examples
    --------
    >>> discounted_returns([0.0, 1.0], 0.5)
    array([0.5, 1. ])
    """
    if truncated is None:
        truncated = bootstrap_value is not None
    if bootstrap_value is not None and not truncated:
        raise ValueError("bootstrap_value given for an episode that terminated")
    if truncated and bootstrap_value is None:
        raise ValueError("truncated episodes need a bootstrap_value")
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    g = float(bootstrap_value) if truncated else 0.0
    for t in range(len(r) - 1, -1, -1):
        g = r[t] + gamma * g
        out[t] = g
    return out


def trajectory_returns(traj, gamma):
    return discounted_returns(traj.rewards, gamma, traj.bootstrap_value, traj.truncated)


def compute_overestimation(trajectories, gamma, predictions=None):
    """``(q_hat, g_hat, q_hat - g_hat)`` over all pairs of the given episodes.

    ``predictions`` overrides the per-episode predictions when given (one
    array per trajectory, aligned position by position).
    """
    trajectories = list(trajectories)
    if predictions is None:
        predictions = [t.predictions for t in trajectories]
    preds, rets = [], []
    for traj, p in zip(trajectories, predictions, strict=True):
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (len(traj),):
            raise ValueError(f"predictions of shape {p.shape} for an episode of length {len(traj)}")
        preds.append(p)
        rets.append(trajectory_returns(traj, gamma))
    if not preds or sum(len(p) for p in preds) == 0:
        raise ValueError("no state-action pairs to evaluate")
    q_hat = float(np.mean(np.concatenate(preds)))
    g_hat = float(np.mean(np.concatenate(rets)))
    return q_hat, g_hat, q_hat - g_hat


@dataclass
class EvaluationPhaseReport:
    phase_index: int
    env_steps_at_phase: int
    completed_episode_returns: np.ndarray
    mean_predicted_q: float
    mean_empirical_return: float
    overestimation: float
    n_state_action_pairs: int
    n_truncation_bootstraps: int
    trajectories: list = field(default_factory=list, repr=False)

    @property
    def is_empty(self):
        return self.n_state_action_pairs == 0

    @property
    def mean_return(self):
        if len(self.completed_episode_returns) == 0:
            return float("nan")
        return float(np.mean(self.completed_episode_returns))


def run_evaluation_phase(agent, env, eval_epsilon, phase_length_steps, rng, gamma,
                         phase_index=0, env_steps_at_phase=0):
    """Roll out the near-greedy policy for ``phase_length_steps`` env steps.

    Episodes ended by the environment's time limit are completed and
    bootstrapped with ``agent.bootstrap_value``; the episode still running
    when the step budget runs out is discarded. A phase with no completed
    episode gives an empty report whose estimates are NaN.
    """
    check_positive_int(phase_length_steps, "phase_length_steps")
    rng = as_generator(rng)
    trajectories = []
    obs = env.reset(rng)
    rewards, preds = [], []
    for _ in range(phase_length_steps):
        action, pred = agent.act(obs, eval_epsilon, rng)
        obs, reward, terminal, truncated = env.step(action, rng)
        rewards.append(reward)
        preds.append(pred)
        if terminal or truncated:
            boot = agent.bootstrap_value(obs) if truncated else None
            trajectories.append(Trajectory(np.array(rewards), np.array(preds), bool(truncated), boot))
            rewards, preds = [], []
            obs = env.reset(rng)
    n_pairs = sum(len(t) for t in trajectories)
    if n_pairs:
        q_hat, g_hat, over = compute_overestimation(trajectories, gamma)
    else:
        q_hat = g_hat = over = float("nan")
    return EvaluationPhaseReport(
        phase_index=phase_index,
        env_steps_at_phase=env_steps_at_phase,
        completed_episode_returns=np.array([t.score for t in trajectories]),
        mean_predicted_q=q_hat,
        mean_empirical_return=g_hat,
        overestimation=over,
        n_state_action_pairs=n_pairs,
        n_truncation_bootstraps=sum(t.truncated for t in trajectories),
        trajectories=trajectories,
    )


# ---------------------------------------------------------------------------
# Aggregate metrics


@dataclass
class ScorePanel:
    """Per-(environment, seed) scores with optional ``(random, human)`` baselines."""

    scores: dict
    baselines: Optional[dict] = None

    def __post_init__(self):
        self.scores = {env: np.asarray(v, dtype=np.float64).ravel() for env, v in self.scores.items()}
        if not self.scores:
            raise ValueError("empty score panel")
        for env, v in self.scores.items():
            if len(v) == 0:
                raise ValueError(f"no seeds for environment {env!r}")
        if self.baselines is not None:
            missing = set(self.scores) - set(self.baselines)
            if missing:
                raise ValueError(f"missing baselines for {sorted(missing)}")
            for env in self.scores:
                lo, hi = self.baselines[env]
                if hi == lo:
                    raise ValueError(f"human score equals random score for {env!r}")

    @property
    def envs(self):
        return list(self.scores)

    def normalized(self):
        if self.baselines is None:
            raise ValueError("normalization needs (random, human) baselines")
        out = {}
        for env, v in self.scores.items():
            lo, hi = self.baselines[env]
            out[env] = (v - lo) / (hi - lo)
        return out


@dataclass
class AggregateMetrics:
    cells: dict
    mean: float
    median: float
    iqm: float


def iqm(values, axis=None):
    """Interquartile mean: drop the lowest and highest 25% of values, average the rest."""
    return stats.trim_mean(np.asarray(values, dtype=np.float64), 0.25, axis=axis)


def _aggregate(cells):
    env_means = np.array([np.mean(v) for v in cells.values()])
    flat = np.concatenate(list(cells.values()))
    return float(np.mean(env_means)), float(np.median(env_means)), float(iqm(flat))


def normalized_score_metrics(panel, normalize=True):
    """Per-cell normalized scores with their mean, median and IQM.

    Mean and median are taken over per-environment seed means; IQM over the
    flattened environment-by-seed cells. With ``normalize=False`` the raw
    scores are aggregated instead.
    """
    cells = panel.normalized() if normalize else dict(panel.scores)
    return AggregateMetrics(cells, *_aggregate(cells))


STATISTICS = ("mean", "median", "iqm")


def _statistic_batched(resampled, statistic):
    """Statistic for each of R resampled panels; ``resampled`` is a list of (R, M_j)."""
    if statistic == "iqm":
        return iqm(np.concatenate(resampled, axis=1), axis=1)
    env_means = np.stack([r.mean(axis=1) for r in resampled], axis=1)
    if statistic == "mean":
        return env_means.mean(axis=1)
    return np.median(env_means, axis=1)


def point_statistic(panel, statistic, normalize=None):
    if statistic not in STATISTICS:
        raise ValueError(f"statistic must be one of {STATISTICS}")
    normalize = panel.baselines is not None if normalize is None else normalize
    return getattr(normalized_score_metrics(panel, normalize), statistic)


def stratified_bootstrap_ci(panel, statistic="iqm", n_resamples=2000, confidence=0.95,
                            rng=None, normalize=None):
    """Percentile bootstrap interval, resampling seeds within each environment.

    Normalizes with the panel's baselines when present (override with
    ``normalize``).
    """
    if statistic not in STATISTICS:
        raise ValueError(f"statistic must be one of {STATISTICS}")
    check_positive_int(n_resamples, "n_resamples")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    rng = as_generator(rng)
    normalize = panel.baselines is not None if normalize is None else normalize
    cells = panel.normalized() if normalize else panel.scores
    for env, v in cells.items():
        if len(v) < 2:
            raise ValueError(f"stratum {env!r} has fewer than 2 seeds")
    resampled = []
    for v in cells.values():
        idx = rng.integers(len(v), size=(n_resamples, len(v)))
        resampled.append(v[idx])
    dist = _statistic_batched(resampled, statistic)
    alpha = 1.0 - confidence
    low, high = np.quantile(dist, [alpha / 2, 1.0 - alpha / 2])
    return float(low), float(high)


def auc_mean(curves):
    """Mean of a per-phase metric pooled across phases and seeds.

    ``curves`` is a sequence of equal-length per-seed curves.
    """
    curves = [np.asarray(c, dtype=np.float64).ravel() for c in curves]
    if not curves:
        raise ValueError("no curves")
    if len({len(c) for c in curves}) != 1:
        raise ValueError("curves have different lengths")
    if len(curves[0]) == 0:
        raise ValueError("empty curves")
    return float(np.mean(np.stack(curves)))
