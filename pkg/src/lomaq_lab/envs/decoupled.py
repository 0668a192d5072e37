"""n independent tabular MDPs run side by side (empty agent graph).

The joint transition is the product of per-copy transitions and the global
reward is the sum of per-copy rewards, so both the additive reward property
and the per-block maximisation property hold for any partition.  Episodes
are cut at ``horizon`` (a truncation, not a terminal state).
"""

from __future__ import annotations

import itertools

import numpy as np

from ..agent_graph import AgentGraph
from .base import EnvContractError, MultiAgentEnv


class DecoupledChain(MultiAgentEnv):
    name = "decoupled"

    def __init__(self, transitions, rewards, horizon: int = 50, local_rewards: bool = True):
        self.P = [np.asarray(p, dtype=np.float64) for p in transitions]  # (S, A, S)
        self.R = [np.asarray(r, dtype=np.float64) for r in rewards]  # (S, A)
        if len(self.P) != len(self.R) or not self.P:
            raise ValueError("need one transition and one reward table per copy")
        shapes = {p.shape for p in self.P}
        if len(shapes) != 1:
            raise ValueError("copies must share state/action counts")
        S, A, S2 = self.P[0].shape
        if S != S2 or S > 5 or A > 5:
            raise ValueError("copies are limited to at most 5 states and 5 actions")
        for p in self.P:
            if not np.allclose(p.sum(axis=2), 1.0):
                raise ValueError("transition rows must sum to 1")
        self.n = len(self.P)
        self.n_states, self.n_actions = S, A
        self.obs_dim = S
        self.horizon = int(horizon)
        self.local_rewards = local_rewards
        self.graph = AgentGraph.edgeless(self.n)
        self._rng = np.random.default_rng()
        self.s = np.zeros(self.n, dtype=np.int64)
        self.t = 0
        self._done = True

    @classmethod
    def random(cls, n: int = 2, n_states: int = 3, n_actions: int = 2, seed=None,
               horizon: int = 50, concentration: float = 0.5, **kw) -> "DecoupledChain":
        rng = np.random.default_rng(seed)
        P = [rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions)) for _ in range(n)]
        R = [rng.uniform(0.0, 1.0, size=(n_states, n_actions)) for _ in range(n)]
        return cls(P, R, horizon=horizon, **kw)

    def encode_obs(self, s) -> np.ndarray:
        obs = np.zeros((self.n, self.n_states))
        obs[np.arange(self.n), np.asarray(s)] = 1.0
        return obs

    def joint_states(self):
        return itertools.product(range(self.n_states), repeat=self.n)

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.s = self._rng.integers(0, self.n_states, size=self.n)
        self.t = 0
        self._done = False
        return self.encode_obs(self.s)

    def set_state(self, s) -> np.ndarray:
        self.s = np.asarray(s, dtype=np.int64).copy()
        self.t = 0
        self._done = False
        return self.encode_obs(self.s)

    def step(self, actions):
        if self._done:
            raise EnvContractError("step() after episode end; call reset()")
        a = self._check_actions(actions)
        r = np.array([self.R[i][self.s[i], a[i]] for i in range(self.n)])
        self.s = np.array([self._rng.choice(self.n_states, p=self.P[i][self.s[i], a[i]]) for i in range(self.n)])
        self.t += 1
        self._done = self.t >= self.horizon
        return self._emit(self.encode_obs(self.s), r, self._done, truncated=self._done)


def value_iteration_oracle(env, gamma: float, tol: float = 1e-12, max_iter: int = 100_000) -> list:
    """Optimal Q table (S, A) for every copy of a :class:`DecoupledChain`.

    The global optimal Q is the sum of the per-copy tables.
    """
    if not isinstance(env, DecoupledChain):
        raise TypeError(f"value iteration needs a tabular DecoupledChain, got {type(env).__name__}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    out = []
    for P, R in zip(env.P, env.R):
        Q = np.zeros_like(R)
        for _ in range(max_iter):
            Qn = R + gamma * P @ Q.max(axis=1)
            if np.max(np.abs(Qn - Q)) < tol:
                Q = Qn
                break
            Q = Qn
        out.append(Q)
    return out


def global_q(q_tables, s, a) -> float:
    return float(sum(q[s_i, a_i] for q, s_i, a_i in zip(q_tables, s, a)))
