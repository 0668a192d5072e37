"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeats 3]

Covers the bandit run loop and the cart-pole integrator.  The first numba
call is reported separately because it includes compilation (or a cache
load when ``cache=True`` has already written one).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from lomaq_lab._accel import HAVE_NUMBA
from lomaq_lab.agent_graph import Partition
from lomaq_lab.bandit import BanditConfig, LinearBanditEnv, run_experiment
from lomaq_lab.envs.cartpole import CartPoleParams, integrate


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_bandit(use_numba, T, repeats):
    env = LinearBanditEnv.random(6, 2, 4, Partition.singletons(6), noise_sd=0.1, seed=0)
    return best_of(lambda: run_experiment(env, BanditConfig(), T, seed=0, use_numba=use_numba), repeats)


def bench_cartpole(use_numba, steps, repeats):
    p = CartPoleParams()
    rng = np.random.default_rng(0)
    push = rng.choice([-p.force, p.force], size=(steps, 4))

    def loop():
        s = np.zeros((4, 4))
        s[:, 0] = np.arange(4) * p.rest_spacing
        for k in range(steps):
            s = integrate(s, push[k], p, use_numba=use_numba)

    return best_of(loop, repeats)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--bandit-steps", type=int, default=20_000)
    ap.add_argument("--cartpole-steps", type=int, default=50_000)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path runs")
    rows = []
    for name, fn, size in (("bandit run loop", bench_bandit, args.bandit_steps),
                           ("cart-pole integrator", bench_cartpole, args.cartpole_steps)):
        numpy_t = fn(False, size, args.repeats)
        if HAVE_NUMBA:
            t = time.perf_counter()
            fn(True, min(size, 100), 1)
            warm = time.perf_counter() - t
            numba_t = fn(True, size, args.repeats)
            rows.append((name, size, numpy_t, numba_t, warm))
        else:
            rows.append((name, size, numpy_t, float("nan"), float("nan")))
    print(f"{'kernel':<22}{'steps':>8}{'numpy s':>10}{'numba s':>10}{'speedup':>9}{'first call s':>14}")
    for name, size, a, b, warm in rows:
        print(f"{name:<22}{size:>8}{a:>10.3f}{b:>10.3f}{a / b:>9.1f}{warm:>14.3f}")


if __name__ == "__main__":
    main()
