"""Experiment orchestration: INI configs, seeded runs, aggregation and CSV output.

Config files are flat INI with three sections::

    [run]
    kind = train
    seeds = 0 1 2
    steps = 100000
    out = runs/cartpole

    [env]
    name = cartpole
    n = 4

    [algo]
    partition = singletons
    mode = hard

``[algo]`` keys are :class:`LomaqConfig` fields for training runs and
:class:`BanditConfig` / bandit-instance fields for bandit runs.  Values are
parsed as Python literals when possible and kept as strings otherwise.
"""

from __future__ import annotations

import ast
import configparser
import csv
import dataclasses
import json
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .agent_graph import Partition, resolve_partition
from .bandit import BanditConfig, LinearBanditEnv, run_experiment
from .envs import make_env
from .envs.matrix_game import matrix_game_tables
from .lomaq import ConfigError, LomaqConfig, LomaqTrainer, evaluate
from .reward_decomp import RewardDecomposer, SubsetFamily, default_weight

KINDS = ("bandit", "train", "eval", "decompose-viz", "matrix-game")
METRIC_FIELDS = ("step", "test_return_mean", "test_return_min", "test_return_max")
OUT_ENV = "LOMAQ_LAB_OUT"


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


@dataclass
class RunConfig:
    kind: str = "train"
    env: dict = field(default_factory=dict)
    algo: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    steps: int = 100_000
    out: str = "runs"

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        part = self.algo.get("partition")
        if isinstance(part, str) and part not in ("singletons", "joint") and not Path(part).exists():
            raise ConfigError(f"partition file {part} does not exist")


def load_config(path) -> RunConfig:
    if not Path(path).exists():
        raise ConfigError(f"config file {path} does not exist")
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case
    cp.read(path)
    run = dict(cp["run"]) if cp.has_section("run") else {}
    cfg = RunConfig()
    if "kind" in run:
        cfg.kind = run["kind"]
    if "seeds" in run:
        cfg.seeds = [int(s) for s in run["seeds"].replace(",", " ").split()]
    if "steps" in run:
        cfg.steps = int(run["steps"])
    if "out" in run:
        cfg.out = run["out"]
    if cp.has_section("env"):
        cfg.env = {k: _literal(v) for k, v in cp["env"].items()}
    if cp.has_section("algo"):
        cfg.algo = {k: _literal(v) for k, v in cp["algo"].items()}
    return cfg


def output_root(out) -> Path:
    """``out`` resolved against ``$LOMAQ_LAB_OUT`` when that is set (absolute paths win)."""
    root = os.environ.get(OUT_ENV)
    p = Path(out)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def lomaq_config(algo: dict, env=None) -> LomaqConfig:
    names = {f.name for f in dataclasses.fields(LomaqConfig)}
    unknown = set(algo) - names
    if unknown:
        raise ConfigError(f"unknown [algo] keys: {sorted(unknown)}")
    kw = dict(algo)
    if env is not None and "gamma" not in kw and getattr(env, "name", "") == "decoupled":
        kw["gamma"] = 0.9
    return LomaqConfig(**kw)


def build_env(env_cfg: dict, reward_mode: str = "local"):
    kw = dict(env_cfg)
    name = kw.pop("name", "cartpole")
    kw.setdefault("local_rewards", reward_mode == "local")
    return make_env(name, **kw)


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def aggregate(per_seed: dict, key: str = "test_return_mean") -> list[dict]:
    """Rows ``{step, seed<s>..., mean, min, max}`` over steps present in every seed."""
    seeds = sorted(per_seed)
    steps = sorted(set.intersection(*[{r["step"] for r in per_seed[s]} for s in seeds]))
    lookup = {s: {r["step"]: r[key] for r in per_seed[s]} for s in seeds}
    rows = []
    for t in steps:
        vals = [lookup[s][t] for s in seeds]
        rows.append({"step": t, **{f"seed{s}": v for s, v in zip(seeds, vals)},
                     "mean": float(np.mean(vals)), "min": min(vals), "max": max(vals)})
    return rows


def write_aggregate(path, rows) -> None:
    if not rows:
        Path(path).write_text("step,mean,min,max\n")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if k != "step" else v) for k, v in r.items()})


def manifest(cfg: RunConfig, lcfg: LomaqConfig, env, seed: int) -> dict:
    env_cfg = env.config() if hasattr(env, "config") else dict(cfg.env)
    return {"kind": cfg.kind, "seed": seed, "steps": cfg.steps, "env": {"name": env.name, **env_cfg, **cfg.env},
            "algo": lcfg.to_dict()}


def train_one(cfg: RunConfig, seed: int, out_dir: Path, checkpoints: bool = True) -> list[dict]:
    """One seeded training run writing ``metrics.csv``, ``run.json`` and per-eval checkpoints."""
    lcfg = lomaq_config(cfg.algo)
    env = build_env(cfg.env, lcfg.reward_mode)
    lcfg = lomaq_config(cfg.algo, env)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(manifest(cfg, lcfg, env, seed), indent=2, sort_keys=True) + "\n")
    trainer = LomaqTrainer(env, lcfg, seed=seed)

    def on_eval(tr, row):
        write_metrics(out_dir / "metrics.csv", tr.metrics)
        if checkpoints:
            tr.save(out_dir / f"ckpt_{row['step']}.txt")

    trainer.run(cfg.steps, on_eval)
    write_metrics(out_dir / "metrics.csv", trainer.metrics)
    return trainer.metrics


def run_suite(cfg: RunConfig, checkpoints: bool = True) -> tuple[Path, bool]:
    """All seeds of a training config; returns (artifact dir, all runs succeeded)."""
    cfg.validate()
    root = output_root(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    per_seed, ok = {}, True
    for seed in cfg.seeds:
        try:
            per_seed[seed] = train_one(cfg, seed, root / f"seed_{seed}", checkpoints)
        except Exception:
            ok = False
            (root / f"seed_{seed}").mkdir(parents=True, exist_ok=True)
            (root / f"seed_{seed}" / "error.txt").write_text(traceback.format_exc())
    if per_seed:
        write_aggregate(root / "aggregate.csv", aggregate(per_seed))
    return root, ok


# -- matrix game --------------------------------------------------------------


def matrix_game_experiment(partition: str | Partition = "joint", seed: int = 0, steps: int = 20_000,
                           lr: float = 5e-3, **overrides) -> dict:
    """Fit LOMAQ with gamma=0 and eps=1 on the two-table game.

    Returns the learned block values over all four joint actions, the
    matching target tables and the per-block max error.
    """
    env = make_env("matrix_game")
    part = partition if isinstance(partition, Partition) else resolve_partition(partition, 2)
    # the two blocks carry different payoff tables, so their mixers are not shared
    kw = dict(partition=part, gamma=0.0, eps_start=1.0, eps_end=1.0, lr=lr, target_period=1, share_mixers=False)
    kw.update(overrides)
    tr = LomaqTrainer(env, LomaqConfig(**kw), seed=seed, capacity=max(steps, 1))
    counts = np.zeros((2, 2))
    for _ in range(steps):
        tr.env_step()
        counts[tuple(tr.buffer.actions[(tr.buffer.pos - 1) % tr.buffer.capacity])] += 1
    U = tr.utilities.q(env.reset()[None])[0]  # (2 agents, 2 actions)
    learned = np.zeros((len(tr.mixers), 2, 2))
    for a1 in range(2):
        for a2 in range(2):
            learned[:, a1, a2] = tr.mixers.values(np.array([[U[0, a1], U[1, a2]]]))[0]
    q1, q2, q = matrix_game_tables()
    targets = np.array([q]) if len(tr.mixers) == 1 else np.array([q1, q2])
    err = np.abs(learned - targets).reshape(len(tr.mixers), -1).max(axis=1)
    return {"learned": learned, "targets": targets, "block_error": err, "global": learned.sum(axis=0),
            "visits": counts / max(steps, 1), "trainer": tr}


# -- reward decomposition figure ---------------------------------------------


def collect_random_transitions(env, steps: int, seed: int):
    """Uniform-random play; returns stacked (obs, actions, r_global)."""
    rng = np.random.default_rng(seed)
    obs = env.reset(seed=seed)
    O, A, R = [], [], []
    for _ in range(steps):
        a = rng.integers(0, env.n_actions, size=env.n)
        st = env.step(a)
        O.append(obs)
        A.append(a)
        R.append(st.r_global)
        obs = env.reset() if st.done else st.next_obs
    return np.array(O), np.array(A), np.array(R)


def train_decomposer(env, max_card: int = 1, lam: float = 0.0, steps: int = 20_000, batch: int = 32,
                     data: int = 50_000, seed: int = 0, weight=default_weight, lr: float = 0.01):
    """Fit a decomposer on uniform-random play; returns (decomposer, (obs, actions, r))."""
    obs, act, r = collect_random_transitions(env, data, seed)
    fam = SubsetFamily(env.graph, max_card, weight)
    dec = RewardDecomposer(fam, env.obs_dim, env.n_actions, lr=lr, lam=lam, rng=np.random.default_rng(seed + 1))
    rng = np.random.default_rng(seed + 2)
    for _ in range(steps):
        idx = rng.integers(0, len(r), size=batch)
        dec.train_step(obs[idx], act[idx], r[idx])
    return dec, (obs, act, r)


def viz_grid(env, dec: RewardDecomposer, dxs=None) -> list[tuple]:
    """Subset rewards with agent 0 at ``dx1`` left of the landmark and agent 1 at ``dx2`` right of it.

    Both agents take action 0 (stay).  Rows are ``(dx1, dx2, r_I_name, value)``.
    """
    dxs = np.round(np.linspace(0.0, 0.3, 7), 10) if dxs is None else dxs
    lm = env.landmarks[0]
    rows = []
    for dx1 in dxs:
        for dx2 in dxs:
            obs = env.set_positions([[lm[0] - dx1, lm[1]], [lm[0] + dx2, lm[1]]])
            R = dec.subset_rewards(obs, np.zeros(env.n, dtype=np.int64))
            for k in range(len(dec.family)):
                rows.append((float(dx1), float(dx2), dec.family.name(k), float(R[k])))
            rows.append((float(dx1), float(dx2), "r_pred", float(R.sum())))
    return rows


def write_viz(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dx1", "dx2", "r_I_name", "value"])
        for dx1, dx2, name, v in rows:
            w.writerow([repr(dx1), repr(dx2), name, repr(v)])


# -- bandit -------------------------------------------------------------------


def bandit_curves(n: int, K: int, d: int, T: int, partition="singletons", seeds=(0,), noise: float = 0.1,
                  cfg: Optional[BanditConfig] = None) -> dict:
    """Cumulative-regret curve per seed; the instance is drawn from the seed, so
    different partitions on the same seed face the same ground truth."""
    cfg = cfg or BanditConfig()
    part = partition if isinstance(partition, Partition) else resolve_partition(partition, n)
    out = {}
    for s in seeds:
        env = LinearBanditEnv.random(n, K, d, part, noise_sd=noise, seed=s)
        out[s] = run_experiment(env, cfg, T, seed=s).cumulative_regret
    return out


def write_bandit_csv(path, curves: dict, stride: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "t", "cumulative_regret"])
        for s, cum in curves.items():
            T = len(cum)
            for t in range(stride, T + 1, stride):
                w.writerow([s, t, repr(float(cum[t - 1]))])
            if T % stride:
                w.writerow([s, T, repr(float(cum[-1]))])


def evaluate_checkpoint(env, ckpt, cfg: LomaqConfig, episodes: int = 20) -> dict:
    tr = LomaqTrainer(env, cfg, seed=0, capacity=1)
    tr.load(ckpt)
    return evaluate(tr.utilities, env, episodes)
