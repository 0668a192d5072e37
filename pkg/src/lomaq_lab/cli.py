"""Command-line entry point: ``lomaq-lab <verb> [options]``.

Verbs and their outputs:

* ``bandit-run``: CSV ``seed,t,cumulative_regret``.
* ``train``: ``metrics.csv`` (``step,test_return_mean,test_return_min,test_return_max``),
  ``run.json`` and a checkpoint per evaluation, one directory per seed, plus
  ``aggregate.csv`` at the root.
* ``eval``: JSON ``{test_return_mean, test_return_min, test_return_max, episodes}``.
* ``decompose-viz``: CSV ``dx1,dx2,r_I_name,value``.
* ``matrix-game``: CSV ``block,a1,a2,learned,target``.

Every verb takes ``--config`` (INI, see :mod:`lomaq_lab.harness`); flags
given on the command line override the file.  ``$LOMAQ_LAB_OUT`` sets the root
for relative output paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .bandit import BanditConfig, ConfigError as BanditConfigError
from .envs import ENV_NAMES, make_env
from .lomaq import ConfigError


def _base(sub, name, help_):
    p = sub.add_parser(name, help=help_)
    p.add_argument("--config", help="INI config file")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lomaq-lab", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = _base(sub, "bandit-run", "Multi-OFUL regret curves")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--partition", help='"singletons", "joint" or a partition file')
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--stride", type=int, default=1, help="write every stride-th step")
    p.add_argument("--out")

    p = _base(sub, "train", "train LOMAQ (or a baseline configuration)")
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--seed", type=int, nargs="+", dest="seeds")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.add_argument("--no-checkpoints", action="store_true")

    p = _base(sub, "eval", "greedy evaluation of a checkpoint")
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--out")

    p = _base(sub, "decompose-viz", "subset-reward surfaces on two-agent navigation")
    p.add_argument("--env", default="nav2", choices=ENV_NAMES)
    p.add_argument("--max-card", type=int, choices=(1, 2))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = _base(sub, "matrix-game", "representability on the two-table matrix game")
    p.add_argument("--partition", choices=("joint", "singletons"))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    return ap


def _merge(args, cfg: harness.RunConfig, algo_keys=(), env_keys=()):
    for k in algo_keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg.algo[k] = v
    for k in env_keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg.env[k if k != "env" else "name"] = v
    for k in ("steps", "seeds", "out"):
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    return cfg


def _load(args, kind) -> harness.RunConfig:
    cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    cfg.kind = kind
    return cfg


def cmd_bandit(args) -> int:
    cfg = _merge(args, _load(args, "bandit"), ("n", "k", "d", "horizon", "partition", "alpha", "lam", "delta", "noise"))
    a = cfg.algo
    bcfg = BanditConfig(alpha=a.get("alpha", 1.0), lam=a.get("lam", 1.0), delta=a.get("delta", 0.1))
    curves = harness.bandit_curves(a.get("n", 6), a.get("k", 2), a.get("d", 4), a.get("horizon", 20000),
                                   a.get("partition", "singletons"), cfg.seeds, a.get("noise", 0.1), bcfg)
    out = harness.output_root(cfg.out if args.out or args.config else "bandit.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.write_bandit_csv(out, curves, args.stride)
    for s, cum in curves.items():
        print(f"seed {s}: final cumulative regret {cum[-1]:.3f}")
    return 0


def cmd_train(args) -> int:
    cfg = _merge(args, _load(args, "train"), env_keys=("env",))
    root, ok = harness.run_suite(cfg, checkpoints=not args.no_checkpoints)
    print(f"artifacts in {root}")
    return 0 if ok else 1


def cmd_eval(args) -> int:
    cfg = _merge(args, _load(args, "eval"), env_keys=("env",))
    lcfg = harness.lomaq_config(cfg.algo)
    env = harness.build_env(cfg.env, lcfg.reward_mode)
    stats = harness.evaluate_checkpoint(env, args.checkpoint, harness.lomaq_config(cfg.algo, env), args.episodes)
    text = json.dumps(stats, indent=2)
    if args.out:
        out = harness.output_root(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)
    return 0


def cmd_decompose(args) -> int:
    cfg = _load(args, "decompose-viz")
    a = dict(cfg.algo)
    if args.max_card is not None:
        a["max_card"] = args.max_card
    if args.lam is not None:
        a["lam"] = args.lam
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    steps = args.steps if args.steps is not None else a.pop("steps", 20_000)
    env = make_env(args.env if args.env else cfg.env.get("name", "nav2"))
    dec, _ = harness.train_decomposer(env, a.get("max_card", 1), a.get("lam", 0.0), steps=steps, seed=seed)
    out = harness.output_root(args.out or cfg.out if (args.out or args.config) else "decompose.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.write_viz(out, harness.viz_grid(env, dec))
    print(f"wrote {out}")
    return 0


def cmd_matrix(args) -> int:
    cfg = _load(args, "matrix-game")
    part = args.partition or cfg.algo.pop("partition", "joint")
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    steps = args.steps if args.steps is not None else (cfg.steps if args.config else 20_000)
    res = harness.matrix_game_experiment(part, seed=seed, steps=steps)
    out = harness.output_root(args.out or (cfg.out if args.config else "matrix_game.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "a1", "a2", "learned", "target"])
        for j in range(res["learned"].shape[0]):
            for a1 in range(2):
                for a2 in range(2):
                    w.writerow([j, a1, a2, repr(float(res["learned"][j, a1, a2])),
                                repr(float(res["targets"][j, a1, a2]))])
    for j, e in enumerate(res["block_error"]):
        print(f"block {j}: max |F - target| = {e:.4f}")
    return 0


COMMANDS = {"bandit-run": cmd_bandit, "train": cmd_train, "eval": cmd_eval,
            "decompose-viz": cmd_decompose, "matrix-game": cmd_matrix}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, BanditConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
