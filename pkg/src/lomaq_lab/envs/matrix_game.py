"""Two-agent one-shot game with two local payoff tables.

``Q1[a1, a2] = a1 + a2`` and ``Q2[a1, a2] = 1 + max(0, 1 - a1 - a2)``; the
global payoff is their sum, ``2 + max(0, a1 + a2 - 1)``.  The first table is
increasing in each action and the second decreasing, so no single pair of
utilities orders both agents' actions consistently for a per-agent
partition.
"""

from __future__ import annotations

import numpy as np

from ..agent_graph import AgentGraph
from .base import EnvContractError, MultiAgentEnv


def matrix_game_tables() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a1, a2 = np.meshgrid([0, 1], [0, 1], indexing="ij")
    q1 = (a1 + a2).astype(np.float64)
    q2 = 1.0 + np.maximum(0, 1 - a1 - a2)
    return q1, q2, q1 + q2


class MatrixGame(MultiAgentEnv):
    name = "matrix_game"
    n = 2
    n_actions = 2
    obs_dim = 1
    horizon = 1
    gamma = 0.0

    def __init__(self, local_rewards: bool = True):
        self.local_rewards = local_rewards
        self.graph = AgentGraph.from_edges(2, [(0, 1)])
        self.q1, self.q2, self.q = matrix_game_tables()
        self._done = True

    def _obs(self) -> np.ndarray:
        return np.ones((2, 1))

    def reset(self, seed=None) -> np.ndarray:
        self._done = False
        return self._obs()

    def step(self, actions):
        if self._done:
            raise EnvContractError("step() after episode end; call reset()")
        a = self._check_actions(actions)
        self._done = True
        return self._emit(self._obs(), [self.q1[a[0], a[1]], self.q2[a[0], a[1]]], True)
