"""Learned reward decomposition over small agent subsets.

A family of subsets ``I`` (drawn from each agent's closed neighbourhood, up to
``max_card`` members) gets one regression net ``r_I(s_I, a_I)`` each.  The
nets are fit so their sum matches the global reward, with an L1 penalty
``w(|I|) |r_I|`` that pushes credit toward small subsets.  Per-agent rewards
are then read off by splitting each ``r_I`` evenly across its members.
"""

from __future__ import annotations

import itertools
from collections import deque
from typing import Callable, Optional

import numpy as np

from .agent_graph import AgentGraph, closed_neighborhood
from .tensor_nn import Mlp, Optimizer, TrainingError

REWARD_ACTIVATIONS = ("relu", "leaky_relu", "tanh", "identity")


def default_weight(k: int) -> float:
    """0 for singletons, ``k - 1`` for larger subsets."""
    return 0.0 if k <= 1 else float(k - 1)


class SubsetFamily:
    def __init__(self, graph: AgentGraph, max_card: int = 1,
                 weight: Callable[[int], float] = default_weight):
        if max_card < 1:
            raise ValueError(f"max_card must be >= 1, got {max_card}")
        self.n = graph.n
        self.max_card = max_card
        found = set()
        for i in range(graph.n):
            hood = sorted(closed_neighborhood(graph, i))
            for k in range(1, min(max_card, len(hood)) + 1):
                found.update(itertools.combinations(hood, k))
        self.subsets: list[tuple[int, ...]] = sorted(found, key=lambda s: (len(s), s))
        self.sizes = np.array([len(s) for s in self.subsets])
        self.weights = np.array([weight(len(s)) for s in self.subsets], dtype=np.float64)
        ws = [weight(k) for k in range(1, max_card + 1)]
        if any(b < a for a, b in zip(ws, ws[1:])):
            raise ValueError("subset weights must be nondecreasing in cardinality")

    def __len__(self) -> int:
        return len(self.subsets)

    def __iter__(self):
        return iter(self.subsets)

    def index(self, subset) -> int:
        return self.subsets.index(tuple(sorted(subset)))

    def name(self, k: int) -> str:
        return "r_" + "_".join(map(str, self.subsets[k]))

    def share_matrix(self) -> np.ndarray:
        """(|family|, n) matrix M with ``r_local = r_I @ M`` (1/|I| to each member)."""
        M = np.zeros((len(self.subsets), self.n))
        for k, s in enumerate(self.subsets):
            M[k, list(s)] = 1.0 / len(s)
        return M


class RewardDecomposer:
    """Regression nets ``r_I`` plus the gating state used before inference is trusted.

    Args:
        family: the subsets to model.
        obs_dim, n_actions: per-agent observation width and action count;
            each member contributes ``obs ++ onehot(action)`` to the input.
        lr: Adam learning rate.
        lam: weight of the cardinality-weighted L1 penalty.
        delta: inference tolerance; defaults to ``0.1 * n``.
        share: one net per cardinality (a one-hot agent id is appended per member).
        hidden: widths of the three hidden layers.
        window: rolling window for the trained-enough gate.
    """

    def __init__(self, family: SubsetFamily, obs_dim: int, n_actions: int, lr: float = 0.01,
                 lam: float = 0.0, delta: Optional[float] = None, share: bool = False,
                 hidden=(64, 128, 64), window: int = 500, rng=None):
        rng = np.random.default_rng(rng)
        self.family = family
        self.n = family.n
        self.obs_dim, self.n_actions = obs_dim, n_actions
        self.lam = float(lam)
        self.delta = 0.1 * self.n if delta is None else float(delta)
        self.share = share
        per_member = obs_dim + n_actions + (self.n if share else 0)
        self.nets: list[Mlp] = []
        self.net_of: list[int] = []
        by_card: dict = {}
        # hidden layers cycle through relu / leaky_relu / tanh; the head is linear
        acts = [REWARD_ACTIVATIONS[k % 3] for k in range(len(hidden))] + ["identity"]
        for s in family:
            if share and len(s) in by_card:
                self.net_of.append(by_card[len(s)])
                continue
            net = Mlp([per_member * len(s), *hidden, 1], acts, rng=rng)
            net.weights[-1][...] = 0.0  # zero head: untrained prediction is exactly 0
            net.biases[-1][...] = 0.0
            self.nets.append(net)
            by_card[len(s)] = len(self.nets) - 1
            self.net_of.append(len(self.nets) - 1)
        self.opt = Optimizer(self.nets, kind="adam", lr=lr)
        self._share = family.share_matrix()
        self._errors: deque = deque(maxlen=window)
        self.trained_enough = False
        self.steps = 0

    def input_dim(self, k: int) -> int:
        return self.nets[self.net_of[k]].input_dim

    def _features(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """(B, n, per_member) member feature rows."""
        B = obs.shape[0]
        onehot = np.zeros((B, self.n, self.n_actions))
        np.put_along_axis(onehot, actions[..., None], 1.0, axis=2)
        parts = [obs, onehot]
        if self.share:
            parts.append(np.broadcast_to(np.eye(self.n), (B, self.n, self.n)))
        return np.concatenate(parts, axis=2)

    def _prep(self, obs, actions):
        obs = np.asarray(obs, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.int64)
        single = obs.ndim == 2
        if single:
            obs, actions = obs[None], actions[None]
        if obs.shape[1:] != (self.n, self.obs_dim) or actions.shape[1:] != (self.n,):
            raise ValueError(
                f"expected obs (B, {self.n}, {self.obs_dim}) and actions (B, {self.n}); "
                f"got {obs.shape} and {actions.shape}"
            )
        return obs, actions, single

    def subset_rewards(self, obs, actions, _keep_cache=False):
        """``r_I`` for every subset: shape ``(B, |family|)`` (or ``(|family|,)``)."""
        obs, actions, single = self._prep(obs, actions)
        feats = self._features(obs, actions)
        B = obs.shape[0]
        out = np.zeros((B, len(self.family)))
        caches = []
        for k, s in enumerate(self.family):
            x = feats[:, list(s), :].reshape(B, -1)
            y, cache = self.nets[self.net_of[k]].forward(x)
            out[:, k] = y[:, 0]
            caches.append(cache)
        if _keep_cache:
            return out, caches
        return out[0] if single else out

    def predict_global(self, obs, actions):
        return self.subset_rewards(obs, actions).sum(axis=-1)

    def train_step(self, obs, actions, r_global) -> float:
        """One Adam step on ``sum_b (r_pred - r)^2 + lam sum_b sum_I w(|I|) |r_I|``."""
        obs, actions, _ = self._prep(obs, actions)
        r_global = np.asarray(r_global, dtype=np.float64).reshape(-1)
        R, caches = self.subset_rewards(obs, actions, _keep_cache=True)
        resid = R.sum(axis=1) - r_global
        loss = float(np.sum(resid ** 2) + self.lam * np.sum(self.family.weights * np.abs(R)))
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite decomposer loss at step {self.steps}")
        dR = 2.0 * resid[:, None] + self.lam * self.family.weights * np.sign(R)
        grads = [np.zeros_like(p) for p in self.opt.params]
        offsets = np.cumsum([0] + [len(net.params()) for net in self.nets])
        for k in range(len(self.family)):
            j = self.net_of[k]
            g, _ = self.nets[j].backward(caches[k], dR[:, k:k + 1])
            for q, gq in enumerate(g):
                grads[offsets[j] + q] += gq
        self.opt.step(grads)
        self.steps += 1
        return loss

    def record_error(self, obs, actions, r_global) -> float:
        """Push one |r_pred - r_global| into the gate window; returns the error."""
        err = abs(float(self.predict_global(obs, actions)) - float(r_global))
        self._errors.append(err)
        if (not self.trained_enough and len(self._errors) == self._errors.maxlen
                and np.mean(self._errors) < self.delta):
            self.trained_enough = True
        return err

    def split(self, r_subsets: np.ndarray) -> np.ndarray:
        """Per-agent rewards from subset rewards (each r_I split evenly over I)."""
        return r_subsets @ self._share


def predict_global(dec: RewardDecomposer, obs, actions):
    return dec.predict_global(obs, actions)


def train_decomposer_step(dec: RewardDecomposer, obs, actions, r_global) -> float:
    return dec.train_step(obs, actions, r_global)


def infer_local(dec: RewardDecomposer, obs, actions, r_global, delta: Optional[float] = None):
    """Per-agent rewards, or ``None`` when ``|sum r_I - r_global| >= delta``."""
    delta = dec.delta if delta is None else delta
    R = dec.subset_rewards(obs, actions)
    if abs(R.sum() - float(r_global)) >= delta:
        return None
    return dec.split(R)


def lomaq_rd_bridge(dec: RewardDecomposer, obs, actions, r_global, fallback: str = "even",
                    require_gate: bool = True) -> tuple[np.ndarray, bool]:
    """Replace a global reward by inferred local rewards.

    Returns ``(r_local, flagged)``.  When inference fails (or the gate is not
    yet open) the reward is split evenly; with ``fallback="skip"`` the
    transition is additionally flagged so TD targets use block shares of the
    global reward.
    """
    if fallback not in ("even", "skip"):
        raise ValueError(f"unknown fallback {fallback!r}")
    r_local = None
    if dec.trained_enough or not require_gate:
        r_local = infer_local(dec, obs, actions, r_global)
    if r_local is not None:
        return r_local, False
    return np.full(dec.n, float(r_global) / dec.n), fallback == "skip"
