"""LOMAQ: per-agent utilities, per-block monotonic mixers, local-reward TD training.

Each agent i has a utility net ``U_i(obs_i) -> R^{|A_i|}``.  Each partition
block J has a mixer ``F_J`` over the chosen-action utilities of the agents in
its kappa-hop input set, trained toward

    y_J = sum_{j in J} r_j + gamma * F_J^-(max_a U_i^-(obs'_i) for i in inputs(J))

with target copies refreshed every ``target_period`` episodes.  Mixers are kept
monotone either by projecting their weights onto the nonnegative orthant
after every step (``mode="hard"``) or by a penalty on negative input slopes
(``mode="soft"``).  Acting only ever reads the utilities.

``mixer="none"`` replaces every F_J by the plain sum of its block's
utilities; with singleton blocks that is independent Q-learning.
"""

from __future__ import annotations

import copy
import itertools
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .agent_graph import AgentGraph, Partition, block_input_set, resolve_partition
from .reward_decomp import RewardDecomposer, SubsetFamily, lomaq_rd_bridge
from .tensor_nn import Mlp, Optimizer, TrainingError, load_checkpoint, relu_project, save_checkpoint

UTILITY_ACTIVATIONS = ("relu", "relu", "identity")
MIXER_ACTIVATIONS = ("elu", "elu", "identity")
REWARD_MODES = ("local", "global_split", "rd")


class ConfigError(ValueError):
    pass


@dataclass
class LomaqConfig:
    partition: object = "singletons"  # Partition, or "singletons" / "joint" / file path
    kappa: int = 1
    gamma: float = 0.99
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_anneal: int = 100_000
    lr: float = 5e-4
    optimizer: str = "rmsprop"
    target_period: int = 50  # episodes
    batch_size: int = 50
    mode: str = "hard"  # hard | soft
    lambda_mono: float = 0.0
    utility_hidden: int = 64
    mixer_hidden: int = 32
    share_utilities: bool = True
    share_mixers: bool = True
    mixer: str = "mlp"  # mlp | none
    reward_mode: str = "local"  # local | global_split | rd
    buffer_episodes: int = 5000
    train_every: int = 1
    eval_every: int = 10_000
    eval_episodes: int = 20
    per_agent_exploration: bool = False
    max_grad_norm: Optional[float] = None
    rd_max_card: int = 2
    rd_lambda: float = 0.0
    rd_lr: float = 0.01
    rd_batch: int = 5
    rd_delta: Optional[float] = None
    rd_fallback: str = "even"
    rd_share: bool = False
    rd_window: int = 500

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        if self.lambda_mono < 0:
            raise ConfigError("lambda_mono must be >= 0")
        if self.mode not in ("hard", "soft"):
            raise ConfigError(f"mode must be hard or soft, got {self.mode!r}")
        if self.mixer not in ("mlp", "none"):
            raise ConfigError(f"mixer must be mlp or none, got {self.mixer!r}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}")
        if self.kappa < 0 or self.batch_size < 1 or self.target_period < 1 or self.train_every < 1:
            raise ConfigError("kappa, batch_size, target_period and train_every must be positive")
        if self.rd_fallback not in ("even", "skip"):
            raise ConfigError(f"rd_fallback must be even or skip, got {self.rd_fallback!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.partition, Partition):
            d["partition"] = [sorted(b) for b in self.partition.sorted_blocks()]
        return d


def epsilon_at(cfg: LomaqConfig, t: int) -> float:
    """Linear anneal from eps_start to eps_end over eps_anneal steps, then flat."""
    if cfg.eps_anneal <= 0 or t >= cfg.eps_anneal:
        return cfg.eps_end
    frac = t / cfg.eps_anneal
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


# -- networks -----------------------------------------------------------------


class UtilitySet:
    """Utility nets for all agents.  With sharing, one net reads ``obs_i ++ onehot(i)``."""

    def __init__(self, n: int, obs_dim: int, n_actions: int, hidden: int = 64, share: bool = True, rng=None):
        rng = np.random.default_rng(rng)
        self.n, self.obs_dim, self.n_actions, self.share = n, obs_dim, n_actions, share
        width = obs_dim + (n if share else 0)
        sizes = [width, hidden, hidden, n_actions]
        self.nets = [Mlp(sizes, UTILITY_ACTIVATIONS, rng=rng) for _ in range(1 if share else n)]

    def clone(self) -> "UtilitySet":
        new = copy.copy(self)
        new.nets = [net.copy() for net in self.nets]
        return new

    def load_from(self, other: "UtilitySet") -> None:
        for dst, src in zip(self.nets, other.nets):
            dst.load_from(src)

    def forward(self, obs: np.ndarray):
        """``obs`` (B, n, obs_dim) -> Q (B, n, A) plus a cache for :meth:`backward`."""
        B = obs.shape[0]
        if self.share:
            x = np.concatenate([obs, np.broadcast_to(np.eye(self.n), (B, self.n, self.n))], axis=2)
            q, cache = self.nets[0].forward(x.reshape(B * self.n, -1))
            return q.reshape(B, self.n, self.n_actions), [cache]
        out = np.empty((B, self.n, self.n_actions))
        caches = []
        for i, net in enumerate(self.nets):
            out[:, i], c = net.forward(obs[:, i])
            caches.append(c)
        return out, caches

    def q(self, obs: np.ndarray) -> np.ndarray:
        return self.forward(obs)[0]

    def backward(self, caches, dQ: np.ndarray) -> list[np.ndarray]:
        B = dQ.shape[0]
        if self.share:
            return self.nets[0].backward(caches[0], dQ.reshape(B * self.n, -1))[0]
        grads = []
        for i, net in enumerate(self.nets):
            grads.extend(net.backward(caches[i], dQ[:, i])[0])
        return grads

    def greedy(self, obs: np.ndarray) -> np.ndarray:
        """Per-agent argmax (lowest index on ties); row i reads only obs[i]."""
        return np.argmax(self.q(np.asarray(obs, dtype=np.float64)[None])[0], axis=1)


class MixerSet:
    """One monotone mixer per block, wired to the block's kappa-hop input set.

    With ``share=True`` blocks of equal size whose input arity is the largest
    in the partition (the interior blocks) use a single net; the remaining
    boundary blocks get their own.
    """

    def __init__(self, graph: AgentGraph, partition: Partition, kappa: int = 1, hidden: int = 32,
                 share: bool = True, kind: str = "mlp", rng=None):
        rng = np.random.default_rng(rng)
        if partition.n != graph.n:
            raise ConfigError(f"partition covers {partition.n} agents, graph has {graph.n}")
        self.n = graph.n
        self.kind = kind
        self.blocks = partition.sorted_blocks()
        if kind == "none":
            self.inputs = [np.array(b) for b in self.blocks]
        else:
            self.inputs = [np.array(sorted(block_input_set(graph, b, kappa))) for b in self.blocks]
        self.nets: list[Mlp] = []
        self.net_of: list[int] = []
        if kind == "mlp":
            top = max(len(ix) for ix in self.inputs)
            shared: dict = {}
            for b, ix in zip(self.blocks, self.inputs):
                key = (len(b), len(ix))
                if share and len(ix) == top and key in shared:
                    self.net_of.append(shared[key])
                    continue
                self.nets.append(Mlp([len(ix), hidden, hidden, 1], MIXER_ACTIVATIONS, rng=rng))
                self.net_of.append(len(self.nets) - 1)
                if share and len(ix) == top:
                    shared[key] = len(self.nets) - 1
        self.groups = [[j for j, g in enumerate(self.net_of) if g == k] for k in range(len(self.nets))]
        self.membership = np.zeros((self.n, len(self.blocks)))
        for j, b in enumerate(self.blocks):
            self.membership[b, j] = 1.0
        self.sizes = self.membership.sum(axis=0)

    def __len__(self) -> int:
        return len(self.blocks)

    def clone(self) -> "MixerSet":
        new = copy.copy(self)
        new.nets = [net.copy() for net in self.nets]
        return new

    def load_from(self, other: "MixerSet") -> None:
        for dst, src in zip(self.nets, other.nets):
            dst.load_from(src)

    def _stack(self, U, group):
        return np.concatenate([U[:, self.inputs[j]] for j in group], axis=0)

    def forward(self, U: np.ndarray):
        """``U`` (B, n) chosen utilities -> F (B, n_blocks) plus caches."""
        B = U.shape[0]
        F = np.empty((B, len(self.blocks)))
        if self.kind == "none":
            for j, ix in enumerate(self.inputs):
                F[:, j] = U[:, ix].sum(axis=1)
            return F, None
        caches = []
        for net, group in zip(self.nets, self.groups):
            y, c = net.forward(self._stack(U, group))
            F[:, group] = y[:, 0].reshape(len(group), B).T
            caches.append(c)
        return F, caches

    def values(self, U: np.ndarray) -> np.ndarray:
        return self.forward(U)[0]

    def block_value(self, U: np.ndarray, j: int) -> np.ndarray:
        """F_j on (B, n) utilities; reads only the block's input columns."""
        U = np.atleast_2d(U)
        if self.kind == "none":
            return U[:, self.inputs[j]].sum(axis=1)
        return self.nets[self.net_of[j]](U[:, self.inputs[j]])[:, 0]

    def backward(self, caches, dF: np.ndarray):
        """Returns (param grads in :meth:`params` order, dL/dU of shape (B, n))."""
        B = dF.shape[0]
        dU = np.zeros((B, self.n))
        if self.kind == "none":
            for j, ix in enumerate(self.inputs):
                dU[:, ix] += dF[:, j:j + 1]
            return [], dU
        grads = []
        for net, group, c in zip(self.nets, self.groups, caches):
            dy = dF[:, group].T.reshape(-1, 1)
            g, dx = net.backward(c, dy)
            grads.extend(g)
            for k, j in enumerate(group):
                dU[:, self.inputs[j]] += dx[k * B:(k + 1) * B]
        return grads, dU

    def penalty(self, U: np.ndarray):
        """``sum_J sum_b sum_k relu(-dF_J/dU_k)`` at the rows of ``U`` and its param grads."""
        total, grads = 0.0, []
        for net, group in zip(self.nets, self.groups):
            p, g, _ = net.negative_slope_penalty(self._stack(U, group))
            total += p
            grads.extend(g)
        return total, grads

    def project(self) -> None:
        for net in self.nets:
            relu_project(net)

    def min_weight(self) -> float:
        return min((float(w.min()) for net in self.nets for w in net.weights), default=0.0)


# -- replay -------------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    r_local: np.ndarray
    r_global: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    flagged: np.ndarray

    def __len__(self) -> int:
        return len(self.r_global)


class ReplayBuffer:
    """Ring buffer of transitions with uniform sampling.  Missing local rewards are NaN."""

    def __init__(self, capacity: int, n: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, n, obs_dim))
        self.next_obs = np.zeros((capacity, n, obs_dim))
        self.actions = np.zeros((capacity, n), dtype=np.int64)
        self.r_local = np.full((capacity, n), np.nan)
        self.r_global = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.flagged = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, actions, r_local, r_global, next_obs, terminal, flagged=False) -> None:
        k = self.pos
        self.obs[k] = obs
        self.actions[k] = actions
        self.r_local[k] = np.nan if r_local is None else r_local
        self.r_global[k] = r_global
        self.next_obs[k] = next_obs
        self.terminal[k] = terminal
        self.flagged[k] = flagged
        self.pos = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def take(self, idx) -> Batch:
        return Batch(self.obs[idx], self.actions[idx], self.r_local[idx], self.r_global[idx],
                     self.next_obs[idx], self.terminal[idx], self.flagged[idx])

    def sample(self, batch_size: int, rng) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        return self.take(rng.integers(0, self.size, size=batch_size))


# -- acting -------------------------------------------------------------------


def greedy_joint_action(utilities: UtilitySet, obs) -> np.ndarray:
    return utilities.greedy(obs)


def epsilon_greedy(a_greedy, eps: float, n_actions: int, rng, per_agent: bool = False) -> np.ndarray:
    """One global coin: with probability eps a uniform joint action, else ``a_greedy``."""
    a = np.asarray(a_greedy, dtype=np.int64)
    if per_agent:
        coins = rng.random(a.shape) < eps
        return np.where(coins, rng.integers(0, n_actions, size=a.shape), a)
    if rng.random() < eps:
        return rng.integers(0, n_actions, size=a.shape)
    return a.copy()


def evaluate(policy, env, episodes: int = 20, seed: int = 1_000_000) -> dict:
    """Greedy rollouts of ``policy.greedy(obs)``; returns mean/min/max episode return."""
    returns = []
    for k in range(episodes):
        obs = env.reset(seed=seed + k)
        total, done = 0.0, False
        while not done:
            st = env.step(policy.greedy(obs))
            total += st.r_global
            obs, done = st.next_obs, st.done
        returns.append(total)
    r = np.array(returns)
    return {"test_return_mean": float(r.mean()), "test_return_min": float(r.min()),
            "test_return_max": float(r.max()), "episodes": episodes}


# -- training -----------------------------------------------------------------


class LomaqTrainer:
    """Owns the online and target nets, replay, optimizer and (optionally) a reward decomposer."""

    def __init__(self, env, config: Optional[LomaqConfig] = None, seed: int = 0, eval_env=None,
                 capacity: Optional[int] = None):
        self.cfg = cfg = config or LomaqConfig()
        cfg.validate()
        self.env = env
        self.eval_env = eval_env if eval_env is not None else copy.deepcopy(env)
        self.seed = seed
        self.n = env.n
        self.partition = (cfg.partition if isinstance(cfg.partition, Partition)
                          else resolve_partition(cfg.partition, env.n))
        ss = np.random.SeedSequence(seed)
        s_util, s_mix, s_rd, s_loop = ss.spawn(4)
        self.rng = np.random.default_rng(s_loop)
        self.utilities = UtilitySet(env.n, env.obs_dim, env.n_actions, cfg.utility_hidden,
                                    cfg.share_utilities, rng=np.random.default_rng(s_util))
        self.mixers = MixerSet(env.graph, self.partition, cfg.kappa, cfg.mixer_hidden, cfg.share_mixers,
                               cfg.mixer, rng=np.random.default_rng(s_mix))
        if cfg.mixer == "mlp" and cfg.mode == "hard":
            self.mixers.project()
        self.target_utilities = self.utilities.clone()
        self.target_mixers = self.mixers.clone()
        self.opt = Optimizer(self.utilities.nets + self.mixers.nets, kind=cfg.optimizer, lr=cfg.lr,
                             max_grad_norm=cfg.max_grad_norm)
        if capacity is None:
            capacity = cfg.buffer_episodes * int(getattr(env, "horizon", 1))
        self.buffer = ReplayBuffer(capacity, env.n, env.obs_dim)
        self.decomposer = None
        if cfg.reward_mode == "rd":
            fam = SubsetFamily(env.graph, cfg.rd_max_card)
            self.decomposer = RewardDecomposer(fam, env.obs_dim, env.n_actions, lr=cfg.rd_lr, lam=cfg.rd_lambda,
                                               delta=cfg.rd_delta, share=cfg.rd_share, window=cfg.rd_window,
                                               rng=np.random.default_rng(s_rd))
        self.env_steps = 0
        self.episodes = 0
        self.train_steps = 0
        self.target_refreshes = 0
        self.metrics: list[dict] = []
        self._obs = None
        self.on_train_step: list[Callable] = []

    # targets and loss

    def block_rewards(self, batch: Batch) -> np.ndarray:
        share = batch.r_global[:, None] * self.mixers.sizes[None, :] / self.n
        if self.cfg.reward_mode == "global_split":
            return share
        use = ~batch.flagged
        if np.isnan(batch.r_local[use]).any():
            raise ConfigError("local reward mode needs per-agent rewards; env is in global-only mode")
        R = np.nan_to_num(batch.r_local) @ self.mixers.membership
        return np.where(batch.flagged[:, None], share, R)

    def td_targets(self, batch: Batch) -> np.ndarray:
        R = self.block_rewards(batch)
        if self.cfg.gamma == 0.0:
            return R
        u_next = self.target_utilities.q(batch.next_obs).max(axis=2)
        boot = self.target_mixers.values(u_next)
        return R + self.cfg.gamma * (~batch.terminal)[:, None] * boot

    def loss_and_grads(self, batch: Batch, y: Optional[np.ndarray] = None):
        """Mean over the batch of ``sum_J (y_J - F_J)^2`` (+ soft penalty) and its gradients."""
        y = self.td_targets(batch) if y is None else y
        B = len(batch)
        Q, ucache = self.utilities.forward(batch.obs)
        U = np.take_along_axis(Q, batch.actions[..., None], axis=2)[..., 0]
        F, mcache = self.mixers.forward(U)
        diff = F - y
        loss = float(np.sum(diff ** 2) / B)
        mgrads, dU = self.mixers.backward(mcache, 2.0 * diff / B)
        penalty = 0.0
        if self.cfg.mode == "soft" and self.cfg.lambda_mono > 0 and self.mixers.nets:
            penalty, pgrads = self.mixers.penalty(U)
            scale = self.cfg.lambda_mono / B
            penalty *= scale
            mgrads = [g + scale * pg for g, pg in zip(mgrads, pgrads)]
        dQ = np.zeros_like(Q)
        np.put_along_axis(dQ, batch.actions[..., None], dU[..., None], axis=2)
        ugrads = self.utilities.backward(ucache, dQ)
        return loss + penalty, ugrads + mgrads, {"td_loss": loss, "penalty": penalty}

    def train_step(self, batch: Optional[Batch] = None) -> float:
        batch = self.buffer.sample(self.cfg.batch_size, self.rng) if batch is None else batch
        loss, grads, _ = self.loss_and_grads(batch)
        if not np.isfinite(loss):
            fd, path = tempfile.mkstemp(prefix="lomaq-nan-batch-", suffix=".npz")
            os.close(fd)
            np.savez(path, **{k: v for k, v in vars(batch).items()})
            raise TrainingError(f"non-finite loss at train step {self.train_steps}; batch saved to {path}")
        self.opt.step(grads)
        if self.cfg.mode == "hard":
            self.mixers.project()
        self.train_steps += 1
        for hook in self.on_train_step:
            hook(self)
        return loss

    def refresh_targets(self) -> None:
        self.target_utilities.load_from(self.utilities)
        self.target_mixers.load_from(self.mixers)
        self.target_refreshes += 1

    # interaction

    def epsilon(self) -> float:
        return epsilon_at(self.cfg, self.env_steps)

    def env_step(self) -> None:
        cfg = self.cfg
        if self._obs is None:
            self._obs = self.env.reset(seed=self.seed)
        obs = self._obs
        a = epsilon_greedy(self.utilities.greedy(obs), self.epsilon(), self.env.n_actions, self.rng,
                           cfg.per_agent_exploration)
        st = self.env.step(a)
        r_local, flagged = st.r_local, False
        if self.decomposer is not None:
            self.decomposer.record_error(obs, a, st.r_global)
            r_local, flagged = lomaq_rd_bridge(self.decomposer, obs, a, st.r_global, cfg.rd_fallback)
        terminal = st.done and not st.truncated
        self.buffer.add(obs, a, r_local, st.r_global, st.next_obs, terminal, flagged)
        self.env_steps += 1
        if len(self.buffer) >= cfg.batch_size and self.env_steps % cfg.train_every == 0:
            self.train_step()
            if self.decomposer is not None:
                b = self.buffer.sample(min(cfg.rd_batch, len(self.buffer)), self.rng)
                self.decomposer.train_step(b.obs, b.actions, b.r_global)
        if st.done:
            self.episodes += 1
            if self.episodes % cfg.target_period == 0:
                self.refresh_targets()
            self._obs = self.env.reset()
        else:
            self._obs = st.next_obs

    def evaluate(self, episodes: Optional[int] = None) -> dict:
        return evaluate(self.utilities, self.eval_env, episodes or self.cfg.eval_episodes)

    def run(self, steps: int, on_eval: Optional[Callable] = None) -> list[dict]:
        for _ in range(steps):
            self.env_step()
            if self.env_steps % self.cfg.eval_every == 0:
                row = {"step": self.env_steps, **self.evaluate()}
                row.pop("episodes")
                self.metrics.append(row)
                if on_eval is not None:
                    on_eval(self, row)
        return self.metrics

    # persistence

    def named_nets(self) -> dict:
        nets = {f"utility{k}": net for k, net in enumerate(self.utilities.nets)}
        nets.update({f"mixer{k}": net for k, net in enumerate(self.mixers.nets)})
        return nets

    def save(self, path) -> None:
        save_checkpoint(path, self.named_nets())

    def load(self, path) -> None:
        loaded = load_checkpoint(path)
        for name, net in self.named_nets().items():
            net.load_from(loaded[name])


def run_training(env, config: Optional[LomaqConfig] = None, seed: int = 0, steps: int = 100_000,
                 on_eval: Optional[Callable] = None) -> tuple[LomaqTrainer, list[dict]]:
    trainer = LomaqTrainer(env, config, seed, capacity=None)
    return trainer, trainer.run(steps, on_eval)


# -- verification oracles -----------------------------------------------------


def qsm_check(q_tables, partition: Partition, budget: int = 1_000_000, tol: float = 1e-9) -> tuple[bool, float]:
    """Compare ``max_a sum_i Q_i(a)`` with ``sum_J max_a sum_{i in J} Q_i(a)``.

    ``q_tables[i]`` is agent i's Q over the joint action at one state, an
    array of shape ``(|A_0|, ..., |A_{n-1}|)``.  Returns ``(holds, gap)`` with
    ``gap = lhs - rhs`` (never positive).
    """
    q = [np.asarray(t, dtype=np.float64) for t in q_tables]
    size = q[0].size
    if size > budget:
        raise ValueError(f"joint action space {size} exceeds enumeration budget {budget}")
    if partition.n != len(q):
        raise ValueError(f"partition covers {partition.n} agents, got {len(q)} tables")
    lhs = float(np.max(sum(q)))
    rhs = float(sum(np.max(sum(q[i] for i in b)) for b in partition.sorted_blocks()))
    gap = lhs - rhs
    return abs(gap) <= tol, gap


def decoupled_q_tables(q_stars, state) -> list[np.ndarray]:
    """Per-copy optimal Q tables lifted to joint-action tables at a joint state."""
    n = len(q_stars)
    shape = tuple(q.shape[1] for q in q_stars)
    out = []
    for i, q in enumerate(q_stars):
        idx = [None] * n
        idx[i] = slice(None)
        out.append(np.broadcast_to(q[state[i]][tuple(idx)], shape).copy())
    return out


def mixer_block_tables(mixers: MixerSet, utility_tables) -> np.ndarray:
    """``F_J(U(a))`` for every joint action: shape ``(n_blocks, |A_0|, ..., |A_{n-1}|)``.

    ``utility_tables[i]`` is the vector ``U_i(s_i, .)``.
    """
    tables = [np.asarray(t, dtype=np.float64) for t in utility_tables]
    shape = tuple(len(t) for t in tables)
    joint = np.array(list(itertools.product(*[range(k) for k in shape])))
    U = np.stack([tables[i][joint[:, i]] for i in range(len(tables))], axis=1)
    return mixers.values(U).T.reshape((len(mixers),) + shape)


def monotone_gradient_check(mixer, samples, h: float = 1e-6, columns=None) -> float:
    """Largest negative forward-difference slope of ``mixer`` over ``samples`` (0 if none).

    ``columns`` restricts the differenced coordinates (default: all).
    """
    f = mixer if not isinstance(mixer, Mlp) else (lambda x: mixer(x)[:, 0])
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    worst = 0.0
    # rows are independent; small chunks keep temporaries off the mmap path
    for lo in range(0, len(x), 256):
        xc = x[lo:lo + 256]
        base = f(xc)
        for k in (range(x.shape[1]) if columns is None else columns):
            xp = xc.copy()
            xp[:, k] += h
            slope = (f(xp) - base) / h
            worst = max(worst, float(-slope.min()))
    return max(0.0, worst)
