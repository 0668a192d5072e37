import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lomaq_lab.agent_graph import AgentGraph, Partition, block_input_set, coarsen
from lomaq_lab.envs import CoupledMultiCartPole, DecoupledChain, MatrixGame, make_env, value_iteration_oracle
from lomaq_lab.envs.matrix_game import matrix_game_tables
from lomaq_lab.lomaq import (
    Batch, ConfigError, LomaqConfig, LomaqTrainer, MixerSet, ReplayBuffer, UtilitySet, epsilon_at, epsilon_greedy,
    evaluate, greedy_joint_action, mixer_block_tables, monotone_gradient_check, qsm_check,
)
from lomaq_lab.tensor_nn import Mlp, Optimizer, TrainingError, relu_project


def constant_utilities(values):
    """UtilitySet whose every agent outputs ``values`` regardless of observation."""
    values = np.asarray(values, dtype=float)
    u = UtilitySet(1, 2, len(values), hidden=4, share=False, rng=0)
    net = u.nets[0]
    net.weights[-1][...] = 0.0
    net.biases[-1][...] = values
    return u


class PdBalancer:
    """Hand-tuned linear controller that keeps every pole up for the full horizon."""

    def greedy(self, obs):
        return (10 * obs[:, 2] + 2 * obs[:, 3] + 0.1 * obs[:, 0] + 0.5 * obs[:, 1] > 0).astype(int)


class CountingEnv(MatrixGame):
    resets = 0

    def reset(self, seed=None):
        self.resets += 1
        return super().reset(seed)


def batch_from(env, trainer, steps, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(steps, env.n, env.obs_dim)
    obs = env.reset(seed=seed)
    for _ in range(steps):
        a = rng.integers(0, env.n_actions, size=env.n)
        st_ = env.step(a)
        buf.add(obs, a, st_.r_local, st_.r_global, st_.next_obs, st_.done and not st_.truncated)
        obs = env.reset() if st_.done else st_.next_obs
    return buf.take(np.arange(steps))


def test_greedy_examples():
    assert greedy_joint_action(constant_utilities([0.1, 0.9]), np.zeros((1, 2)))[0] == 1
    assert greedy_joint_action(constant_utilities([0.5, 0.5, 0.5]), np.zeros((1, 2)))[0] == 0


def test_greedy_is_decentralized():
    rng = np.random.default_rng(0)
    u = UtilitySet(4, 9, 2, share=True, rng=1)
    obs = rng.normal(size=(4, 9))
    a = u.greedy(obs)
    for _ in range(10):
        other = rng.normal(size=(4, 9))
        other[2] = obs[2]
        assert u.greedy(other)[2] == a[2]


def test_decoupled_oracle_utilities_act_optimally():
    env = DecoupledChain.random(n=3, n_states=3, n_actions=3, seed=2)
    qs = value_iteration_oracle(env, 0.9)

    class Oracle:
        def greedy(self, obs):
            s = obs.argmax(axis=1)
            return np.array([np.argmax(q[s_i]) for q, s_i in zip(qs, s)])

    for s in env.joint_states():
        a = Oracle().greedy(env.encode_obs(s))
        best = max(itertools.product(range(3), repeat=3),
                   key=lambda b: sum(q[s_i, b_i] for q, s_i, b_i in zip(qs, s, b)))
        assert sum(q[s_i, a_i] for q, s_i, a_i in zip(qs, s, a)) == pytest.approx(
            sum(q[s_i, b_i] for q, s_i, b_i in zip(qs, s, best)), abs=1e-12)


def test_epsilon_greedy_frequencies():
    rng = np.random.default_rng(0)
    g = np.array([1, 0])
    assert all(np.array_equal(epsilon_greedy(g, 0.0, 2, rng), g) for _ in range(200))
    draws = np.array([epsilon_greedy(g, 1.0, 2, rng) for _ in range(10_000)])
    counts = np.bincount(draws[:, 0] * 2 + draws[:, 1], minlength=4)
    chi2 = np.sum((counts - 2500) ** 2 / 2500)
    assert chi2 < 16.27  # df=3, p=0.001
    hits = np.mean([np.array_equal(epsilon_greedy(g, 0.5, 2, rng), g) for _ in range(10_000)])
    assert abs(hits - (0.5 + 0.5 / 4)) < 0.02


def test_epsilon_schedule():
    cfg = LomaqConfig()
    assert epsilon_at(cfg, 0) == 1.0
    assert epsilon_at(cfg, 50_000) == pytest.approx(0.525)
    assert epsilon_at(cfg, 100_000) == 0.05
    assert epsilon_at(cfg, 10 ** 7) == 0.05


def test_config_validation():
    for bad in (dict(gamma=1.0), dict(lambda_mono=-1.0), dict(mode="fuzzy"), dict(eps_end=0.5, eps_start=0.1)):
        with pytest.raises(ConfigError):
            LomaqConfig(**bad).validate()


def test_td_targets_terminal_and_gamma_zero():
    env = make_env("decoupled", mdp_seed=0)
    tr = LomaqTrainer(env, LomaqConfig(gamma=0.9), seed=0)
    b = batch_from(env, tr, 200)
    rsum = b.r_local @ tr.mixers.membership
    y = tr.td_targets(b)
    b.terminal[:] = True
    assert np.allclose(tr.td_targets(b), rsum, atol=0, rtol=0)
    b.terminal[:] = False
    assert not np.allclose(y, rsum)
    tr0 = LomaqTrainer(env, LomaqConfig(gamma=0.0), seed=0)
    assert np.array_equal(tr0.td_targets(b), rsum)


def test_td_targets_matrix_game_joint():
    env = MatrixGame()
    tr = LomaqTrainer(env, LomaqConfig(partition="joint", gamma=0.0), seed=0)
    b = batch_from(env, tr, 64)
    q = matrix_game_tables()[2]
    assert np.array_equal(tr.td_targets(b)[:, 0], q[b.actions[:, 0], b.actions[:, 1]])


def test_missing_local_rewards_rejected():
    env = make_env("decoupled", mdp_seed=0, local_rewards=False)
    tr = LomaqTrainer(env, LomaqConfig(), seed=0)
    b = batch_from(env, tr, 10)
    with pytest.raises(ConfigError):
        tr.td_targets(b)
    split = LomaqTrainer(env, LomaqConfig(reward_mode="global_split"), seed=0)
    assert np.allclose(split.td_targets(b).sum(axis=1)[b.terminal], b.r_global[b.terminal])


def test_skip_flag_uses_block_share():
    env = make_env("decoupled", n=3, mdp_seed=0)
    tr = LomaqTrainer(env, LomaqConfig(gamma=0.0, partition=Partition([{0, 1}, {2}])), seed=0)
    b = batch_from(env, tr, 20)
    b.flagged[:5] = True
    y = tr.td_targets(b)
    assert np.allclose(y[:5], b.r_global[:5, None] * np.array([2 / 3, 1 / 3]))
    assert np.allclose(y[5:], b.r_local[5:] @ tr.mixers.membership)


def test_perfect_fit_leaves_params_unchanged():
    env = make_env("decoupled", mdp_seed=1)
    tr = LomaqTrainer(env, LomaqConfig(partition="joint"), seed=0)
    b = batch_from(env, tr, 50)
    Q = tr.utilities.q(b.obs)
    U = np.take_along_axis(Q, b.actions[..., None], axis=2)[..., 0]
    loss, grads, _ = tr.loss_and_grads(b, y=tr.mixers.values(U))
    assert loss == 0.0
    before = tr.opt.flat.copy()
    tr.opt.step(grads)
    assert np.array_equal(before, tr.opt.flat)


def test_hard_mode_projection_after_steps():
    env = CoupledMultiCartPole(n=4)
    tr = LomaqTrainer(env, LomaqConfig(lr=0.05), seed=0)
    seen = []
    tr.on_train_step.append(lambda t: seen.append(t.mixers.min_weight()))
    tr.run(300)
    assert seen and min(seen) >= 0.0


def test_soft_penalty_decreases_on_frozen_batch():
    env = CoupledMultiCartPole(n=3)
    tr = LomaqTrainer(env, LomaqConfig(mode="soft", lambda_mono=1.0, lr=1e-3), seed=0)
    for net in tr.mixers.nets:
        net.weights[0][...] = -np.abs(net.weights[0])  # deliberately non-monotone
    b = batch_from(env, tr, 50)
    y = tr.td_targets(b)
    pens = []
    for _ in range(100):
        _, grads, parts = tr.loss_and_grads(b, y)
        pens.append(parts["penalty"])
        tr.opt.step(grads)
    assert pens[0] > 0 and pens[-1] < pens[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_dumps_batch():
    env = make_env("decoupled", mdp_seed=0)
    tr = LomaqTrainer(env, LomaqConfig(gamma=0.0), seed=0)
    b = batch_from(env, tr, 10)
    b.r_local[0, 0] = np.inf
    with pytest.raises(TrainingError, match="batch saved"):
        tr.train_step(b)


def test_target_refresh_count():
    env = make_env("matrix_game")
    tr = LomaqTrainer(env, LomaqConfig(partition="joint", gamma=0.0, target_period=50), seed=0)
    tr.run(177)
    assert tr.episodes == 177 and tr.target_refreshes == 177 // 50


def test_replay_ring_buffer():
    buf = ReplayBuffer(5, 2, 1)
    for k in range(8):
        buf.add(np.full((2, 1), k), [0, 1], [k, 0], k, np.full((2, 1), k + 1), False)
    assert len(buf) == 5
    assert sorted(buf.r_global.tolist()) == [3, 4, 5, 6, 7]
    b = buf.sample(5, np.random.default_rng(0))
    assert np.all(b.next_obs[:, 0, 0] == b.obs[:, 0, 0] + 1)
    with pytest.raises(ValueError):
        ReplayBuffer(5, 2, 1).sample(1, np.random.default_rng(0))


def test_evaluate_protocol():
    env = CountingEnv()
    stats = evaluate(constant_utilities_two_agents(), env, 20)
    assert env.resets == 20 and stats["episodes"] == 20
    assert stats["test_return_min"] == stats["test_return_max"] == stats["test_return_mean"]
    cp = CoupledMultiCartPole(n=4)
    stats = evaluate(PdBalancer(), cp, 20)
    assert stats["test_return_mean"] == 4 * cp.horizon


def constant_utilities_two_agents():
    u = UtilitySet(2, 1, 2, hidden=4, share=True, rng=0)
    u.nets[0].weights[-1][...] = 0.0
    return u


def test_evaluate_reads_no_mixers():
    env = make_env("decoupled", mdp_seed=0)
    tr = LomaqTrainer(env, LomaqConfig(), seed=0)
    a = tr.evaluate(3)
    for net in tr.mixers.nets:
        for p in net.params():
            p[...] = np.nan
    assert tr.evaluate(3) == a


def test_qsm_examples():
    q1, q2, _ = matrix_game_tables()
    ok, gap = qsm_check([q1, q2], Partition.singletons(2))
    assert not ok and gap == pytest.approx(-1.0)
    ok, gap = qsm_check([q1, q2], Partition.joint(2))
    assert ok and gap == 0.0
    with pytest.raises(ValueError):
        qsm_check([np.zeros((10,) * 4)] * 4, Partition.joint(4), budget=1000)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_qsm_trivial_for_joint_partition(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    shape = tuple(rng.integers(1, 4, size=n))
    ok, gap = qsm_check([rng.normal(size=shape) for _ in range(n)], Partition.joint(n))
    assert ok and abs(gap) <= 1e-12


def test_monotone_gradient_check_examples():
    rng = np.random.default_rng(0)
    net = relu_project(Mlp([3, 32, 32, 1], ["elu", "elu", "identity"], rng=1))
    assert monotone_gradient_check(net, rng.normal(size=(1000, 3))) <= 1e-12
    bad = Mlp([2, 1], ["identity"])
    bad.weights[0][...] = [[1.0, -1.0]]
    assert monotone_gradient_check(bad, rng.normal(size=(10, 2))) > 0


def test_soft_trained_mixer_becomes_monotone():
    rng = np.random.default_rng(0)
    net = Mlp([3, 16, 16, 1], ["elu", "elu", "identity"], rng=2)
    opt = Optimizer([net], kind="adam", lr=3e-3)
    lam = 1.0
    for _ in range(3000):
        x = rng.uniform(-2, 2, size=(64, 3))
        target = (x.sum(axis=1) + np.log1p(np.exp(x[:, 0])))[:, None]
        y, cache = net.forward(x)
        grads, _ = net.backward(cache, 2 * (y - target) / len(x))
        _, pgrads, _ = net.negative_slope_penalty(x)
        opt.step([g + lam / len(x) * pg for g, pg in zip(grads, pgrads)])
    assert monotone_gradient_check(net, rng.uniform(-2, 2, size=(1000, 3))) <= 1e-3


def small_graph(n, rng):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return AgentGraph.from_edges(n, [p for p in pairs if rng.random() < 0.5])


def random_partition(n, rng):
    labels = rng.integers(0, n, size=n)
    blocks = {}
    for i, lab in enumerate(labels):
        blocks.setdefault(lab, set()).add(i)
    return Partition(list(blocks.values()))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_mixers_satisfy_qsm(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    A = int(rng.integers(1, 4))
    g = small_graph(n, rng)
    mixers = MixerSet(g, random_partition(n, rng), kappa=int(rng.integers(0, 3)), hidden=8, share=False, rng=seed)
    mixers.project()
    U = [rng.normal(size=A) for _ in range(n)]
    F = mixer_block_tables(mixers, U)
    total = F.sum(axis=0)
    a_star = tuple(int(np.argmax(u)) for u in U)
    # decentralized argmax attains the global max and every block max simultaneously
    assert total[a_star] >= total.max() - 1e-12
    for j in range(len(mixers.blocks)):
        assert F[j][a_star] >= F[j].max() - 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_refined_mixers_sum_to_monotone_coarse_mixer(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    g = small_graph(n, rng)
    fine = Partition.singletons(n)
    coarse = coarsen(fine, [(0, 1)])
    mixers = MixerSet(g, fine, kappa=1, hidden=8, share=False, rng=seed)
    mixers.project()
    for J in coarse:
        members = [j for j, b in enumerate(mixers.blocks) if set(b) <= set(J)]

        def coarse_f(U, members=members):
            return sum(mixers.block_value(U, j) for j in members)

        assert monotone_gradient_check(coarse_f, rng.normal(size=(200, n))) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_truncated_wiring(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    g = small_graph(n, rng)
    kappa = int(rng.integers(0, 3))
    mixers = MixerSet(g, random_partition(n, rng), kappa=kappa, hidden=8, rng=seed)
    U = rng.normal(size=(20, n))
    for j, b in enumerate(mixers.blocks):
        assert set(mixers.inputs[j].tolist()) == block_input_set(g, b, kappa)
        outside = [i for i in range(n) if i not in set(mixers.inputs[j].tolist())]
        if outside:
            V = U.copy()
            V[:, outside] += rng.normal(size=(20, len(outside))) * 10
            assert np.array_equal(mixers.block_value(U, j), mixers.block_value(V, j))
            assert np.array_equal(mixers.values(U)[:, j], mixers.values(V)[:, j])


def test_mixer_sharing_layout():
    m = MixerSet(AgentGraph.line(5), Partition.singletons(5), kappa=1, rng=0)
    assert len(m.nets) == 3
    assert m.net_of[1] == m.net_of[2] == m.net_of[3]
    assert len({m.net_of[0], m.net_of[1], m.net_of[4]}) == 3
    assert len(MixerSet(AgentGraph.line(5), Partition.singletons(5), share=False, rng=0).nets) == 5


def end_to_end_fd(seed, share=True):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    env = make_env("decoupled", n=n, mdp_seed=seed)
    part = random_partition(n, rng)
    cfg = LomaqConfig(partition=part, utility_hidden=6, mixer_hidden=5, share_utilities=share, share_mixers=share)
    tr = LomaqTrainer(env, cfg, seed=seed)
    env.graph = small_graph(n, rng)
    tr.mixers = MixerSet(env.graph, part, 1, 5, share, rng=seed)
    tr.opt = Optimizer(tr.utilities.nets + tr.mixers.nets)
    b = batch_from(env, tr, 8, seed)
    y = rng.normal(size=(8, len(part)))
    _, grads, _ = tr.loss_and_grads(b, y)
    params = tr.opt.params
    h, worst = 1e-5, 0.0
    util_count = sum(len(net.params()) for net in tr.utilities.nets)
    for k in range(len(params)):
        p = params[k]
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + h
            lp = tr.loss_and_grads(b, y)[0]
            p[idx] = old - h
            lm = tr.loss_and_grads(b, y)[0]
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - grads[k][idx]) / max(1e-7, abs(fd), abs(grads[k][idx])))
    return worst, util_count


def test_end_to_end_gradients_through_mixer():
    worst, util_count = end_to_end_fd(3)
    assert util_count > 0 and worst <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    env = CoupledMultiCartPole(n=3)
    tr = LomaqTrainer(env, LomaqConfig(), seed=0)
    tr.save(tmp_path / "c.txt")
    other = LomaqTrainer(env, LomaqConfig(), seed=1)
    other.load(tmp_path / "c.txt")
    assert np.array_equal(other.opt.flat, tr.opt.flat)


def test_training_is_deterministic():
    def run():
        env = make_env("decoupled", mdp_seed=4, horizon=20)
        tr = LomaqTrainer(env, LomaqConfig(gamma=0.9, eval_every=500, eval_episodes=3), seed=5)
        tr.run(1000)
        return tr.opt.flat.copy(), tr.metrics

    (a, ma), (b, mb) = run(), run()
    assert np.array_equal(a, b) and ma == mb


@pytest.mark.slow
def test_decoupled_chain_learns_optimal_policy():
    env = make_env("decoupled", n=2, n_states=3, n_actions=2, mdp_seed=0, horizon=50)
    cfg = LomaqConfig(gamma=0.9, eps_anneal=20_000, lr=1e-3, target_period=10)
    tr = LomaqTrainer(env, cfg, seed=0)
    tr.run(50_000)
    qs = value_iteration_oracle(env, 0.9)
    states = list(env.joint_states())
    match = 0
    for s in states:
        a = tr.utilities.greedy(env.encode_obs(s))
        opt = [np.flatnonzero(np.isclose(q[s_i], q[s_i].max(), atol=1e-9)) for q, s_i in zip(qs, s)]
        match += all(a_i in o for a_i, o in zip(a, opt))
    assert match / len(states) >= 0.95
