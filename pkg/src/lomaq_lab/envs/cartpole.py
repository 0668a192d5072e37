"""Coupled multi-cart-pole: n cart-poles on one axis joined by linear springs.

Each cart follows the classic cart-pole equations with the spring force added
to the applied force, integrated with semi-implicit Euler.  A cart whose pole
tips past the fail angle is marked fallen for the rest of the episode; its
physics keep running, but it earns no further reward.  Setting ``x_limit``
also fails carts that drift that far from their rest position (off by
default: the reward only asks for an upright pole).  The episode ends when every pole has
fallen or at the horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .._accel import njit, numba_enabled
from ..agent_graph import AgentGraph
from .base import EnvContractError, MultiAgentEnv


@dataclass
class CartPoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    gravity: float = 9.8
    force: float = 10.0
    dt: float = 0.02
    fail_angle_deg: float = 12.0
    x_limit: float | None = None
    spring_k: float = 0.5
    rest_spacing: float = 2.0
    horizon: int = 500
    init_noise: float = 0.05


def spring_forces(x: np.ndarray, k: float, rest: float) -> np.ndarray:
    """``k [(x_{i+1} - x_i - L0) - (x_i - x_{i-1} - L0)]`` with missing neighbours dropped."""
    ext = np.diff(x) - rest  # extension of each spring
    f = np.zeros_like(x)
    f[:-1] += k * ext
    f[1:] -= k * ext
    return f


def _physics_np(state, push, p: CartPoleParams):
    x, xd, th, thd = state.T
    total = p.cart_mass + p.pole_mass
    pml = p.pole_mass * p.half_length
    f = push + spring_forces(x, p.spring_k, p.rest_spacing)
    cos, sin = np.cos(th), np.sin(th)
    temp = (f + pml * thd * thd * sin) / total
    thacc = (p.gravity * sin - cos * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total))
    xacc = temp - pml * thacc * cos / total
    xd = xd + p.dt * xacc
    x = x + p.dt * xd
    thd = thd + p.dt * thacc
    th = th + p.dt * thd
    return np.stack([x, xd, th, thd], axis=1)


@njit
def _physics_nb(state, push, cart_mass, pole_mass, half_length, gravity, dt, k, rest):
    n = state.shape[0]
    out = np.empty_like(state)
    total = cart_mass + pole_mass
    pml = pole_mass * half_length
    for i in range(n):
        x = state[i, 0]
        f = push[i]
        if i + 1 < n:
            f += k * (state[i + 1, 0] - x - rest)
        if i > 0:
            f -= k * (x - state[i - 1, 0] - rest)
        xd = state[i, 1]
        th = state[i, 2]
        thd = state[i, 3]
        c = math.cos(th)
        s = math.sin(th)
        temp = (f + pml * thd * thd * s) / total
        thacc = (gravity * s - c * temp) / (half_length * (4.0 / 3.0 - pole_mass * c * c / total))
        xacc = temp - pml * thacc * c / total
        xd = xd + dt * xacc
        thd = thd + dt * thacc
        out[i, 0] = x + dt * xd
        out[i, 1] = xd
        out[i, 2] = th + dt * thd
        out[i, 3] = thd
    return out


def integrate(state: np.ndarray, push: np.ndarray, p: CartPoleParams, use_numba: bool | None = None):
    """One semi-implicit Euler step for all carts; ``state`` rows are (x, x_dot, theta, theta_dot)."""
    if use_numba is None:
        use_numba = numba_enabled()
    if use_numba:
        return _physics_nb(state, push.astype(np.float64), p.cart_mass, p.pole_mass, p.half_length,
                           p.gravity, p.dt, p.spring_k, p.rest_spacing)
    return _physics_np(state, push, p)


class CoupledMultiCartPole(MultiAgentEnv):
    """Agent i observes its own (x - rest, x_dot, theta, theta_dot), an alive flag,
    and the (x - rest, x_dot) of its left and right neighbours (zeros at the ends)."""

    name = "cartpole"
    n_actions = 2
    obs_dim = 9

    def __init__(self, n: int = 4, local_rewards: bool = True, use_numba: bool | None = None, **overrides):
        self.n = int(n)
        self.params = CartPoleParams(**overrides)
        self.local_rewards = local_rewards
        self.graph = AgentGraph.line(self.n)
        self.horizon = self.params.horizon
        self.rest = np.arange(self.n) * self.params.rest_spacing
        self.use_numba = use_numba
        self._rng = np.random.default_rng()
        self.state = np.zeros((self.n, 4))
        self.alive = np.ones(self.n, dtype=bool)
        self.t = 0
        self._done = True

    def config(self) -> dict:
        return {"n": self.n, **asdict(self.params)}

    @property
    def fail_angle(self) -> float:
        return math.radians(self.params.fail_angle_deg)

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        eps = self.params.init_noise
        self.state = self._rng.uniform(-eps, eps, size=(self.n, 4))
        self.state[:, 0] += self.rest
        self.alive = np.ones(self.n, dtype=bool)
        self.t = 0
        self._done = False
        return self._obs()

    def set_state(self, state: np.ndarray, alive=None) -> np.ndarray:
        """Place the system in an exact state (absolute cart positions)."""
        self.state = np.array(state, dtype=np.float64).reshape(self.n, 4)
        self.alive = np.ones(self.n, dtype=bool) if alive is None else np.asarray(alive, dtype=bool).copy()
        self.t = 0
        self._done = False
        return self._obs()

    def _obs(self) -> np.ndarray:
        s = self.state
        own = s.copy()
        own[:, 0] -= self.rest
        obs = np.zeros((self.n, self.obs_dim))
        obs[:, :4] = own
        obs[:, 4] = self.alive
        obs[1:, 5:7] = own[:-1, :2]
        obs[:-1, 7:9] = own[1:, :2]
        return obs

    def upright(self) -> np.ndarray:
        up = np.abs(self.state[:, 2]) <= self.fail_angle
        if self.params.x_limit is not None:
            up &= np.abs(self.state[:, 0] - self.rest) <= self.params.x_limit
        return up

    def step(self, actions, push=None):
        if self._done:
            raise EnvContractError("step() after episode end; call reset()")
        a = self._check_actions(actions)
        if push is None:
            push = np.where(a == 1, self.params.force, -self.params.force).astype(np.float64)
        self.state = integrate(self.state, np.asarray(push, dtype=np.float64), self.params, self.use_numba)
        self.alive &= self.upright()
        self.t += 1
        r_local = self.alive.astype(np.float64)
        all_down = not self.alive.any()
        truncated = (not all_down) and self.t >= self.horizon
        self._done = all_down or truncated
        return self._emit(self._obs(), r_local, self._done, truncated)
