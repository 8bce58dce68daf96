"""Double Q-learning from tabular oracles to deep double-head and double-network agents."""

from .agents import AgentConfig, DeepQAgent
from .envs import MaxBiasChain, StochasticGridworld, make_env, to_tabular
from .tabular import DoubleQLearning, QLearning, TabularMdp, policy_q_evaluation, value_iteration

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "DeepQAgent", "DoubleQLearning", "MaxBiasChain", "QLearning",
    "StochasticGridworld", "TabularMdp", "make_env", "policy_q_evaluation", "to_tabular",
    "value_iteration",
]
