"""Bounded cooperative navigation.

Each agent moves on the plane but is confined to a disc ("region") around its
home.  A landmark counts as covered when some agent is within the cover
radius; the global reward is the number of covered landmarks, each counted
once.  Locally, a covered landmark's point goes to the nearest covering agent
(lowest index on ties).  Agents are neighbours in the graph iff their regions
overlap.

Actions: 0 stay, 1 +x, 2 -x, 3 +y, 4 -y.  A move that would leave the region
is clipped back onto the region boundary.  Rewards are computed from the
positions after the move.
"""

from __future__ import annotations

import math

import numpy as np

from ..agent_graph import AgentGraph
from .base import EnvContractError, MultiAgentEnv

MOVES = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


def overlap_graph(homes: np.ndarray, radii: np.ndarray) -> AgentGraph:
    n = len(homes)
    edges = [
        (i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if np.linalg.norm(homes[i] - homes[j]) < radii[i] + radii[j]
    ]
    return AgentGraph.from_edges(n, edges)


def _uniform_in_disc(rng, center, radius):
    r = radius * math.sqrt(rng.uniform())
    ang = rng.uniform(0, 2 * math.pi)
    return center + r * np.array([math.cos(ang), math.sin(ang)])


class BoundedCooperativeNavigation(MultiAgentEnv):
    """Args:
        n: agent count.
        layout: ``"random"`` (homes uniform in the unit arena), ``"grid"``
            (homes on a square grid, region radius 0.6 x spacing so only
            orthogonal neighbours overlap) or ``"pair"`` (two agents either
            side of one fixed landmark).
        n_landmarks: defaults to n (1 for ``"pair"``).
        observe_colocated: append the number of other agents covering the
            same landmark to each observation.
    """

    name = "navigation"
    n_actions = 5

    def __init__(self, n: int = 4, layout: str = "random", n_landmarks: int | None = None,
                 region_radius: float | None = None, cover_radius: float = 0.1, step_size: float = 0.1,
                 horizon: int = 25, arena: float = 1.0, observe_colocated: bool = True,
                 n_obs_landmarks: int = 2, layout_seed: int = 0, local_rewards: bool = True,
                 resample_landmarks: bool | None = None):
        self.n = int(n)
        self.layout = layout
        self.cover_radius = float(cover_radius)
        self.step_size = float(step_size)
        self.horizon = int(horizon)
        self.arena = float(arena)
        self.observe_colocated = bool(observe_colocated)
        self.n_obs_landmarks = int(n_obs_landmarks)
        self.local_rewards = local_rewards
        lrng = np.random.default_rng(layout_seed)
        if layout == "grid":
            m = math.ceil(math.sqrt(self.n))
            spacing = self.arena / m
            cells = [((c + 0.5) * spacing, (r + 0.5) * spacing) for r in range(m) for c in range(m)]
            self.homes = np.array(cells[: self.n])
            radius = 0.6 * spacing if region_radius is None else region_radius
        elif layout == "pair":
            if self.n != 2:
                raise ValueError("pair layout needs n=2")
            c = self.arena / 2
            self.homes = np.array([[c - 0.2, c], [c + 0.2, c]])
            radius = 0.35 if region_radius is None else region_radius
            n_landmarks = 1 if n_landmarks is None else n_landmarks
        elif layout == "random":
            self.homes = lrng.uniform(0, self.arena, size=(self.n, 2))
            radius = 0.35 if region_radius is None else region_radius
        else:
            raise ValueError(f"unknown layout {layout!r}")
        self.radii = np.full(self.n, float(radius))
        self.n_landmarks = self.n if n_landmarks is None else int(n_landmarks)
        self.resample_landmarks = (layout != "pair") if resample_landmarks is None else resample_landmarks
        self.graph = overlap_graph(self.homes, self.radii)
        self.obs_dim = 4 + 3 * self.n_obs_landmarks + (1 if self.observe_colocated else 0)
        self._rng = np.random.default_rng(layout_seed + 1)
        self.landmarks = self._sample_landmarks(lrng)
        self.pos = self.homes.copy()
        self.t = 0
        self._done = True

    def _sample_landmarks(self, rng) -> np.ndarray:
        if self.layout == "pair":
            return np.full((self.n_landmarks, 2), self.arena / 2)
        return np.array([
            _uniform_in_disc(rng, self.homes[j % self.n], self.radii[j % self.n])
            for j in range(self.n_landmarks)
        ])

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        if self.resample_landmarks:
            self.landmarks = self._sample_landmarks(self._rng)
        self.pos = np.array([_uniform_in_disc(self._rng, self.homes[i], self.radii[i]) for i in range(self.n)])
        self.t = 0
        self._done = False
        return self.observe()

    def set_positions(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64).reshape(self.n, 2)
        self.pos = self._clip(pos)
        self.t = 0
        self._done = False
        return self.observe()

    def _clip(self, pos: np.ndarray) -> np.ndarray:
        off = pos - self.homes
        dist = np.linalg.norm(off, axis=1)
        over = dist > self.radii
        if over.any():
            scale = self.radii[over] / dist[over] * (1.0 - 1e-12)
            off[over] *= scale[:, None]
        return self.homes + off

    def coverage(self, pos=None) -> tuple[np.ndarray, np.ndarray]:
        """(covered mask per landmark, index of credited agent or -1)."""
        pos = self.pos if pos is None else pos
        d = np.linalg.norm(pos[:, None, :] - self.landmarks[None, :, :], axis=2)  # (agents, landmarks)
        within = d <= self.cover_radius
        covered = within.any(axis=0)
        credited = np.where(covered, np.argmin(np.where(within, d, np.inf), axis=0), -1)
        return covered, credited

    def local_reward(self, pos=None) -> np.ndarray:
        covered, credited = self.coverage(pos)
        r = np.zeros(self.n)
        for j in np.flatnonzero(covered):
            r[credited[j]] += 1.0
        return r

    def observe(self, pos=None) -> np.ndarray:
        pos = self.pos if pos is None else pos
        obs = np.zeros((self.n, self.obs_dim))
        obs[:, 0:2] = pos
        obs[:, 2:4] = pos - self.homes
        reach = self.radii + self.cover_radius
        for i in range(self.n):
            dh = np.linalg.norm(self.landmarks - self.homes[i], axis=1)
            order = [j for j in np.argsort(dh, kind="stable") if dh[j] <= reach[i]][: self.n_obs_landmarks]
            for k, j in enumerate(order):
                obs[i, 4 + 3 * k: 6 + 3 * k] = self.landmarks[j] - pos[i]
                obs[i, 6 + 3 * k] = 1.0
        if self.observe_colocated:
            d = np.linalg.norm(pos[:, None, :] - self.landmarks[None, :, :], axis=2)
            within = d <= self.cover_radius
            for i in range(self.n):
                if within[i].any():
                    j = int(np.argmin(np.where(within[i], d[i], np.inf)))
                    obs[i, -1] = within[:, j].sum() - 1
        return obs

    def step(self, actions):
        if self._done:
            raise EnvContractError("step() after episode end; call reset()")
        a = self._check_actions(actions)
        self.pos = self._clip(self.pos + self.step_size * MOVES[a])
        self.t += 1
        self._done = self.t >= self.horizon
        return self._emit(self.observe(), self.local_reward(), self._done, truncated=self._done)
