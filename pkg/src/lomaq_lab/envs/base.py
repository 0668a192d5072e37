from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..agent_graph import AgentGraph


class EnvContractError(RuntimeError):
    """Raised for protocol misuse such as stepping a finished episode."""


@dataclass
class EnvStep:
    next_obs: np.ndarray  # (n, obs_dim)
    r_global: float
    r_local: Optional[np.ndarray]  # (n,) or None in global-only mode
    done: bool
    truncated: bool = False  # episode cut by the horizon, not a terminal state

    @property
    def terminal(self) -> bool:
        return self.done and not self.truncated


class MultiAgentEnv:
    """Common surface: homogeneous discrete actions, per-agent observation rows."""

    name = "base"
    n: int
    n_actions: int
    obs_dim: int
    graph: AgentGraph
    horizon: int
    local_rewards = True  # False -> step() returns r_local=None

    def reset(self, seed=None) -> np.ndarray:
        raise NotImplementedError

    def step(self, actions) -> EnvStep:
        raise NotImplementedError

    def _check_actions(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.int64)
        if a.shape != (self.n,):
            raise ValueError(f"expected {self.n} actions, got shape {a.shape}")
        if a.min() < 0 or a.max() >= self.n_actions:
            raise ValueError(f"actions must lie in 0..{self.n_actions - 1}, got {a}")
        return a

    def _emit(self, obs, r_local, done, truncated=False) -> EnvStep:
        r_local = np.asarray(r_local, dtype=np.float64)
        r_global = float(r_local.sum())
        return EnvStep(obs, r_global, r_local if self.local_rewards else None, done, truncated)


def dump_trajectory(env: MultiAgentEnv, policy: Callable[[np.ndarray], np.ndarray], path,
                    seed=None, max_steps: int | None = None) -> int:
    """Roll out ``policy(obs) -> actions`` and write ``t,agent,obs...,action,r_local,r_global``.

    When the env runs in global-only mode the ``r_local`` column is left empty.
    Returns the number of steps taken.
    """
    obs = env.reset(seed)
    cols = ["t", "agent"] + [f"obs{k}" for k in range(env.obs_dim)] + ["action", "r_local", "r_global"]
    limit = max_steps or env.horizon
    t = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        while t < limit:
            a = np.asarray(policy(obs))
            st = env.step(a)
            for i in range(env.n):
                rl = "" if st.r_local is None else repr(float(st.r_local[i]))
                w.writerow([t, i, *map(repr, obs[i].tolist()), int(a[i]), rl, repr(st.r_global)])
            obs = st.next_obs
            t += 1
            if st.done:
                break
    return t
