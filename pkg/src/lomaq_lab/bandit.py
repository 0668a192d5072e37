"""Partitioned contextual linear bandits (Multi-OFUL) and a regret harness.

Each block ``J`` of the partition keeps one ridge estimator per joint
sub-action ``a_J``.  Sub-actions are indexed in mixed radix ``K`` over the
block's members in increasing agent order, so index 0 is the
lexicographically smallest sub-action and ties resolve to it.

The per-step select/update work runs either in a numba kernel over the whole
horizon or in a vectorised numpy loop (see :mod:`lomaq_lab._accel`).  Both
paths consume the same pre-drawn contexts and noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._accel import njit, numba_enabled
from .agent_graph import Partition

REFACTOR_EVERY = 1000


class ConfigError(ValueError):
    pass


def sphere_contexts(rng: np.random.Generator, T: int, d: int, radius: float = 1.0) -> np.ndarray:
    x = rng.normal(size=(T, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return radius * x


@dataclass
class LinearBanditEnv:
    """Ground truth: ``theta_star[i, j]`` is agent i's parameter for action j."""

    theta_star: np.ndarray  # (n, K, d)
    partition: Partition
    noise_sd: np.ndarray  # one per block
    S_x: float = 1.0
    S_theta: float = 1.0
    context_fn: Callable = field(default=sphere_contexts)

    def __post_init__(self):
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64)
        self.noise_sd = np.broadcast_to(
            np.asarray(self.noise_sd, dtype=np.float64), (len(self.partition),)
        ).copy()
        if self.partition.n != self.n:
            raise ConfigError(f"partition covers {self.partition.n} agents, env has {self.n}")
        norms = np.linalg.norm(self.theta_star, axis=2)
        if norms.max() > self.S_theta * (1 + 1e-12):
            raise ConfigError("theta_star exceeds S_theta")
        # |E r_J| <= |J| S_theta S_x must stay inside [-1, 1]
        worst = max(len(b) for b in self.partition) * self.S_theta * self.S_x
        if worst > 1 + 1e-12:
            raise ConfigError(f"block rewards can reach {worst:.3g}; scale S_theta down")

    @property
    def n(self) -> int:
        return self.theta_star.shape[0]

    @property
    def K(self) -> int:
        return self.theta_star.shape[1]

    @property
    def d(self) -> int:
        return self.theta_star.shape[2]

    @property
    def R_max(self) -> float:
        return float(self.noise_sd.max())

    @classmethod
    def random(cls, n: int, K: int, d: int, partition: Partition, noise_sd: float = 0.1,
               seed=None, S_x: float = 1.0) -> "LinearBanditEnv":
        """Random instance with ``S_theta = 1/(n S_x)`` so every block reward is in [-1, 1]."""
        rng = np.random.default_rng(seed)
        S_theta = 1.0 / (n * S_x)
        dirs = rng.normal(size=(n, K, d))
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        radii = S_theta * rng.uniform(0.0, 1.0, size=(n, K, 1)) ** (1.0 / d)
        return cls(dirs * radii, partition, noise_sd, S_x=S_x, S_theta=S_theta)

    def with_partition(self, partition: Partition, noise_sd=None) -> "LinearBanditEnv":
        sd = self.noise_sd.max() if noise_sd is None else noise_sd
        return LinearBanditEnv(self.theta_star, partition, sd, self.S_x, self.S_theta, self.context_fn)

    def block_rewards(self, x: np.ndarray, a: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """Noisy per-block rewards given standard-normal ``noise`` (one per block)."""
        per_agent = self.theta_star[np.arange(self.n), a] @ x
        return np.array([per_agent[sorted(b)].sum() for b in self.partition]) + self.noise_sd * noise


def beta_j(t: float, delta: float, block_size: int, n_blocks: int, K: int, d: int,
           lam: float, S_theta: float, S_x: float, R_max: float) -> float:
    """Confidence radius squared for one block.

    ``sqrt(beta) = sqrt(lam) |J| S_theta + R_max sqrt(d log(|P| K^|J| (1 + t S_x) / lam / delta))``.
    The log is clamped at 0 so very large ``lam`` cannot make the root imaginary.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    return _sqrt_beta(t, delta, block_size, n_blocks, K, d, lam, S_theta, S_x, R_max) ** 2


@njit
def _sqrt_beta(t, delta, size, n_blocks, K, d, lam, S_theta, S_x, R_max):
    arg = n_blocks * float(K) ** size * (1.0 + t * S_x) / lam / delta
    lg = math.log(arg) if arg > 1.0 else 0.0
    return math.sqrt(lam) * size * S_theta + R_max * math.sqrt(d * lg)


@dataclass
class BanditConfig:
    alpha: float = 1.0
    lam: float = 1.0
    delta: float = 0.1
    enum_budget: float = 5e7


class MultiOfulState:
    """Per-(block, sub-action) Gram matrices, inverses and response vectors."""

    def __init__(self, partition: Partition, K: int, d: int, alpha: float = 1.0,
                 lam: float = 1.0, delta: float = 0.1, *, S_theta: float = 1.0,
                 S_x: float = 1.0, R_max: float = 0.0):
        if lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        self.partition = partition
        self.blocks = [np.array(sorted(b), dtype=np.int64) for b in partition]
        self.n, self.K, self.d = partition.n, K, d
        self.alpha, self.lam, self.delta = float(alpha), float(lam), float(delta)
        self.S_theta, self.S_x, self.R_max = float(S_theta), float(S_x), float(R_max)
        sizes = [len(b) for b in self.blocks]
        self.arm_offsets = np.concatenate([[0], np.cumsum([K ** s for s in sizes])]).astype(np.int64)
        A = int(self.arm_offsets[-1])
        eye = np.eye(d)
        self.V = np.repeat((lam * eye)[None], A, axis=0)
        self.Vinv = np.repeat((eye / lam)[None], A, axis=0)
        self.Y = np.zeros((A, d))
        self.counts = np.zeros(A, dtype=np.int64)
        self.t = 0
        self.members = np.concatenate(self.blocks).astype(np.int64)
        self.member_ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @classmethod
    def for_env(cls, env: LinearBanditEnv, cfg: BanditConfig) -> "MultiOfulState":
        return cls(env.partition, env.K, env.d, cfg.alpha, cfg.lam, cfg.delta,
                   S_theta=env.S_theta, S_x=env.S_x, R_max=env.R_max)

    @property
    def n_arms(self) -> int:
        """Total sub-arm count, sum over blocks of K^|J|."""
        return int(self.arm_offsets[-1])

    def arms_in_block(self, b: int) -> int:
        return int(self.arm_offsets[b + 1] - self.arm_offsets[b])

    def sqrt_beta(self, b: int, t: float) -> float:
        return _sqrt_beta(float(t), self.delta, len(self.blocks[b]), len(self.blocks), self.K,
                          self.d, self.lam, self.S_theta, self.S_x, self.R_max)

    def decode(self, b: int, m: int) -> np.ndarray:
        """Sub-action digits (one per member, increasing agent order)."""
        size = len(self.blocks[b])
        return np.array([(m // self.K ** (size - 1 - k)) % self.K for k in range(size)], dtype=np.int64)

    def encode(self, b: int, a: np.ndarray) -> int:
        m = 0
        for j in self.blocks[b]:
            m = m * self.K + int(a[j])
        return m

    def theta_hat(self, arm: int) -> np.ndarray:
        return self.Vinv[arm] @ self.Y[arm]

    def scores(self, x: np.ndarray, t: float | None = None) -> list[np.ndarray]:
        """``yhat + alpha * UCB`` for every sub-arm, one array per block."""
        t = self.t + 1 if t is None else t
        out = []
        for b in range(len(self.blocks)):
            lo, hi = self.arm_offsets[b], self.arm_offsets[b + 1]
            th = np.einsum("aij,aj->ai", self.Vinv[lo:hi], self.Y[lo:hi])
            yhat = th @ x
            width = np.sqrt(np.einsum("i,aij,j->a", x, self.Vinv[lo:hi], x))
            out.append(yhat + self.alpha * self.sqrt_beta(b, t) * width)
        return out


def select_action(state: MultiOfulState, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("context must be finite")
    a = np.zeros(state.n, dtype=np.int64)
    for b, s in enumerate(state.scores(x)):
        m = int(np.argmax(s))  # first maximiser = lexicographically smallest
        a[state.blocks[b]] = state.decode(b, m)
    return a


def update(state: MultiOfulState, x, a, rewards) -> None:
    """Rank-one update of the played sub-arm of every block."""
    x = np.asarray(x, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != (len(state.blocks),):
        raise ValueError(f"need one reward per block ({len(state.blocks)}), got {rewards.shape}")
    for b in range(len(state.blocks)):
        arm = int(state.arm_offsets[b]) + state.encode(b, a)
        _rank_one(state.V, state.Vinv, state.Y, state.counts, arm, x, rewards[b])
    state.t += 1


def _rank_one(V, Vinv, Y, counts, arm, x, r):
    u = Vinv[arm] @ x
    Vinv[arm] -= np.outer(u, u) / (1.0 + x @ u)
    V[arm] += np.outer(x, x)
    Y[arm] += r * x
    counts[arm] += 1
    if counts[arm] % REFACTOR_EVERY == 0:
        Vinv[arm] = np.linalg.inv(V[arm])


def optimal_action(env: LinearBanditEnv, x) -> np.ndarray:
    # objective is a sum of per-agent terms, so the argmax decomposes
    return np.argmax(env.theta_star @ np.asarray(x, dtype=np.float64), axis=1)


def instantaneous_regret(env: LinearBanditEnv, x, a) -> float:
    vals = env.theta_star @ np.asarray(x, dtype=np.float64)  # (n, K)
    gaps = vals.max(axis=1) - vals[np.arange(env.n), np.asarray(a)]
    return float(gaps.sum())


def block_regret(env: LinearBanditEnv, x, a) -> np.ndarray:
    """Per-block gap against the best joint sub-action, by enumeration inside each block."""
    vals = env.theta_star @ np.asarray(x, dtype=np.float64)
    a = np.asarray(a)
    out = []
    for blk in env.partition:
        members = sorted(blk)
        best = max(
            sum(vals[i, sub[k]] for k, i in enumerate(members))
            for sub in np.ndindex(*([env.K] * len(members)))
        )
        out.append(best - sum(vals[i, a[i]] for i in members))
    return np.array(out)


# -- full-horizon loops ------------------------------------------------------

@njit
def _run_loop_nb(V, Vinv, Y, counts, members, member_ptr, arm_offsets, theta_star,
                 contexts, noise, noise_sd, alpha, lam, delta, S_theta, S_x, R_max,
                 track_coverage, actions_out):
    T, d = contexts.shape
    n, K, _ = theta_star.shape
    nb = member_ptr.shape[0] - 1
    regret = np.zeros(T)
    covered = True
    a = np.zeros(n, dtype=np.int64)
    u = np.zeros(d)
    th = np.zeros(d)
    for t in range(T):
        x = contexts[t]
        step = t + 1.0
        # select
        for b in range(nb):
            size = member_ptr[b + 1] - member_ptr[b]
            sb = _sqrt_beta(step, delta, size, nb, K, d, lam, S_theta, S_x, R_max)
            best = -np.inf
            best_m = 0
            for arm in range(arm_offsets[b], arm_offsets[b + 1]):
                yhat = 0.0
                quad = 0.0
                for i in range(d):
                    acc = 0.0
                    acc2 = 0.0
                    for j in range(d):
                        acc += Vinv[arm, i, j] * Y[arm, j]
                        acc2 += Vinv[arm, i, j] * x[j]
                    yhat += x[i] * acc
                    quad += x[i] * acc2
                if quad < 0.0:
                    quad = 0.0
                score = yhat + alpha * sb * math.sqrt(quad)
                if score > best:
                    best = score
                    best_m = arm - arm_offsets[b]
            m = best_m
            for k in range(size - 1, -1, -1):
                a[members[member_ptr[b] + k]] = m % K
                m //= K
        # regret
        gap = 0.0
        for i in range(n):
            best_v = -np.inf
            for j in range(K):
                v = 0.0
                for c in range(d):
                    v += theta_star[i, j, c] * x[c]
                if v > best_v:
                    best_v = v
            v = 0.0
            for c in range(d):
                v += theta_star[i, a[i], c] * x[c]
            gap += best_v - v
        regret[t] = gap
        for i in range(n):
            actions_out[t, i] = a[i]
        # observe and update
        for b in range(nb):
            r = noise_sd[b] * noise[t, b]
            m = 0
            for k in range(member_ptr[b], member_ptr[b + 1]):
                i = members[k]
                m = m * K + a[i]
                for c in range(d):
                    r += theta_star[i, a[i], c] * x[c]
            arm = arm_offsets[b] + m
            denom = 1.0
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += Vinv[arm, i, j] * x[j]
                u[i] = acc
                denom += x[i] * acc
            for i in range(d):
                Y[arm, i] += r * x[i]
                for j in range(d):
                    Vinv[arm, i, j] -= u[i] * u[j] / denom
                    V[arm, i, j] += x[i] * x[j]
            counts[arm] += 1
            if counts[arm] % REFACTOR_EVERY == 0:
                Vinv[arm] = np.linalg.inv(V[arm])
            if track_coverage and covered:
                size = member_ptr[b + 1] - member_ptr[b]
                sb = _sqrt_beta(step + 1.0, delta, size, nb, K, d, lam, S_theta, S_x, R_max)
                for i in range(d):
                    acc = 0.0
                    for j in range(d):
                        acc += Vinv[arm, i, j] * Y[arm, j]
                    th[i] = acc
                for c in range(d):
                    v = 0.0
                    for k in range(member_ptr[b], member_ptr[b + 1]):
                        ii = members[k]
                        v += theta_star[ii, a[ii], c]
                    u[c] = v - th[c]
                q = 0.0
                for i in range(d):
                    for j in range(d):
                        q += u[i] * V[arm, i, j] * u[j]
                if math.sqrt(max(q, 0.0)) > sb:
                    covered = False
    return regret, covered


def _run_loop_np(state: MultiOfulState, env: LinearBanditEnv, contexts, noise,
                 track_coverage, actions_out):
    T = contexts.shape[0]
    regret = np.zeros(T)
    covered = True
    nb = len(state.blocks)
    vals_all = np.einsum("ikd,td->tik", env.theta_star, contexts)  # (T, n, K)
    best_all = vals_all.max(axis=2).sum(axis=1)
    rows = np.arange(env.n)
    for t in range(T):
        x = contexts[t]
        a = select_action(state, x)
        actions_out[t] = a
        vals = vals_all[t]
        regret[t] = best_all[t] - vals[rows, a].sum()
        for b in range(nb):
            members = state.blocks[b]
            r = vals[members, a[members]].sum() + env.noise_sd[b] * noise[t, b]
            arm = int(state.arm_offsets[b]) + state.encode(b, a)
            _rank_one(state.V, state.Vinv, state.Y, state.counts, arm, x, r)
            if track_coverage and covered:
                diff = env.theta_star[members, a[members]].sum(axis=0) - state.theta_hat(arm)
                if math.sqrt(max(diff @ state.V[arm] @ diff, 0.0)) > state.sqrt_beta(b, t + 2.0):
                    covered = False
        state.t += 1
    return regret, covered


@dataclass
class BanditResult:
    instant_regret: np.ndarray
    actions: np.ndarray
    covered: bool
    state: MultiOfulState

    @property
    def cumulative_regret(self) -> np.ndarray:
        return np.cumsum(self.instant_regret)


def draw_stream(env: LinearBanditEnv, T: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Contexts (T, d) and standard-normal noise (T, n) for one seed.

    Noise is drawn per agent and the first |P| columns are used, so runs with
    different partitions on the same seed share the context sequence.
    """
    rng = np.random.default_rng(seed)
    contexts = env.context_fn(rng, T, env.d)
    noise = rng.standard_normal((T, env.n))
    return contexts, noise


def run_experiment(env: LinearBanditEnv, cfg: BanditConfig, T: int, seed,
                   track_coverage: bool = False, use_numba: bool | None = None) -> BanditResult:
    """Run Multi-OFUL for ``T`` steps; deterministic given ``seed``.

    The naive joint-arm OFUL baseline is this same routine with
    ``env.with_partition(Partition.joint(n))``.
    """
    if T < 1:
        raise ConfigError("horizon must be >= 1")
    biggest = max(len(b) for b in env.partition)
    if T * env.K ** biggest > cfg.enum_budget:
        raise ConfigError(
            f"T * K^max|J| = {T * env.K ** biggest:.3g} exceeds enumeration budget {cfg.enum_budget:.3g}"
        )
    state = MultiOfulState.for_env(env, cfg)
    contexts, noise = draw_stream(env, T, seed)
    noise = np.ascontiguousarray(noise[:, : len(env.partition)])
    actions = np.zeros((T, env.n), dtype=np.int64)
    if use_numba is None:
        use_numba = numba_enabled()
    if use_numba:
        regret, covered = _run_loop_nb(
            state.V, state.Vinv, state.Y, state.counts, state.members, state.member_ptr,
            state.arm_offsets, env.theta_star, np.ascontiguousarray(contexts), noise,
            env.noise_sd, state.alpha, state.lam, state.delta, state.S_theta, state.S_x,
            state.R_max, track_coverage, actions,
        )
        state.t = T
    else:
        regret, covered = _run_loop_np(state, env, contexts, noise, track_coverage, actions)
    return BanditResult(regret, actions, bool(covered), state)


def slope_ratio(cum: np.ndarray, frac: float = 0.25) -> float:
    """Average slope over the last ``frac`` of the curve divided by the first ``frac``."""
    T = len(cum)
    k = max(1, int(round(frac * T)))
    first = cum[k - 1] / k
    last = (cum[-1] - cum[T - k - 1]) / k
    return float(last / first) if first > 0 else float("inf")
