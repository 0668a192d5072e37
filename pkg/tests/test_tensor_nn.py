import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lomaq_lab.tensor_nn import (
    ACTIVATIONS, Mlp, Optimizer, StaleCacheError, TrainingError, backward, forward, load_checkpoint,
    min_weight, optimizer_step, relu_project, save_checkpoint,
)


def fixed_net(W, b, act):
    net = Mlp([W.shape[1], W.shape[0]], [act])
    net.weights[0][...] = W
    net.biases[0][...] = b
    return net


def fd_params(net, loss, h=1e-5, coords=100, rng=None):
    """Central-difference gradient on random parameter coordinates."""
    rng = np.random.default_rng(rng)
    params = net.params()
    picks = []
    for _ in range(coords):
        k = rng.integers(len(params))
        picks.append((k, tuple(rng.integers(s) for s in params[k].shape)))
    out = []
    for k, idx in picks:
        p = params[k]
        old = p[idx]
        p[idx] = old + h
        lp = loss()
        p[idx] = old - h
        lm = loss()
        p[idx] = old
        out.append((k, idx, (lp - lm) / (2 * h)))
    return out


def rel_err(a, b):
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def test_forward_examples():
    y, _ = forward(fixed_net(np.eye(2), np.zeros(2), "identity"), np.array([1.0, 2.0]))
    assert np.array_equal(y, [1.0, 2.0])
    y, _ = forward(fixed_net(np.eye(2), np.zeros(2), "relu"), np.array([-1.0, 2.0]))
    assert np.array_equal(y, [0.0, 2.0])
    net = Mlp([3, 5, 2], ["relu", "identity"], rng=0)
    # zero input: relu(b1) then W2 relu(b1) + b2; with b1 forced <= 0 the output is exactly b2
    net.biases[0][...] = -np.abs(net.biases[0])
    assert np.array_equal(net(np.zeros(3)), net.biases[1])
    with pytest.raises(ValueError):
        net(np.zeros(4))


def test_linear_backward_outer_product():
    W = np.array([[1.0, -2.0, 0.5], [0.3, 0.0, 1.0]])
    net = fixed_net(W, np.zeros(2), "identity")
    x = np.array([0.2, -1.0, 3.0])
    _, cache = net.forward(x)
    grads, dx = backward(net, cache, np.array([0.0, 1.0]))
    assert np.allclose(grads[0], np.outer([0.0, 1.0], x))
    assert np.allclose(dx, W[1])


def test_relu_subgradient_at_zero():
    net = fixed_net(np.eye(1), np.zeros(1), "relu")
    _, cache = net.forward(np.zeros(1))
    grads, dx = net.backward(cache, np.ones(1))
    assert dx[0] == 0.0 and grads[0][0, 0] == 0.0


def test_stale_cache_rejected():
    net = Mlp([2, 3, 1], ["tanh", "identity"], rng=1)
    _, cache = net.forward(np.ones(2))
    relu_project(net)
    with pytest.raises(StaleCacheError):
        net.backward(cache, np.ones(1))
    other = Mlp([2, 3, 1], ["tanh", "identity"], rng=1)
    with pytest.raises(StaleCacheError):
        other.backward(net.forward(np.ones(2))[1], np.ones(1))


ARCHS = [
    ([6, 16, 16, 3], ["relu", "relu", "identity"]),  # utility
    ([3, 8, 8, 1], ["elu", "elu", "identity"]),  # mixer
    ([7, 8, 12, 8, 1], ["relu", "leaky_relu", "tanh", "identity"]),  # reward net
]


@pytest.mark.parametrize("sizes,acts", ARCHS)
def test_gradients_match_finite_differences(sizes, acts):
    rng = np.random.default_rng(3)
    net = Mlp(sizes, acts, rng=rng)
    x = rng.normal(size=(5, sizes[0]))
    dy = rng.normal(size=(5, sizes[-1]))

    def loss():
        return float(np.sum(net.forward(x)[0] * dy))

    _, cache = net.forward(x)
    grads, dx = net.backward(cache, dy)
    near_kink = any(np.any(np.abs(z) < 1e-6) for z, a in zip(cache.pre, acts) if a == "relu")
    assert not near_kink
    for k, idx, g in fd_params(net, loss, rng=4):
        assert rel_err(grads[k][idx], g) <= 1e-4
    h = 1e-5
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            g = (np.sum(net(xp) * dy) - np.sum(net(xm) * dy)) / (2 * h)
            assert rel_err(dx[i, j], g) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["relu", "leaky_relu", "elu", "tanh", "identity"]))
def test_projected_net_is_monotone(seed, act):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 5))
    net = relu_project(Mlp([m, 6, 6, 1], [act, act, "identity"], rng=rng))
    assert min_weight(net) >= 0
    x = rng.normal(scale=3, size=(50, m))
    base = net(x)[:, 0]
    for i in range(m):
        xp = x.copy()
        xp[:, i] += rng.uniform(1e-6, 1.0, size=50)
        assert np.all(net(xp)[:, 0] >= base - 1e-12)


def test_relu_project_examples():
    net = fixed_net(np.array([[-1.0, 2.0]]), np.array([-3.0]), "identity")
    relu_project(net)
    assert np.array_equal(net.weights[0], [[0.0, 2.0]])
    assert net.biases[0][0] == -3.0  # biases left free
    before = [p.copy() for p in net.params()]
    relu_project(net)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_negative_weight_breaks_monotonicity():
    net = fixed_net(np.array([[1.0, -1.0]]), np.zeros(1), "identity")
    assert net(np.array([0.0, 1.0]))[0] < net(np.array([0.0, 0.0]))[0]


def test_penalty_gradients():
    rng = np.random.default_rng(7)
    net = Mlp([3, 6, 6, 1], ["elu", "elu", "identity"], rng=rng)
    x = rng.normal(size=(8, 3))
    P, grads, dx = net.negative_slope_penalty(x)
    assert P > 0
    # reference: direct evaluation of sum relu(-dF/dx) via input_gradient

    def pen():
        return float(np.maximum(-net.input_gradient(x), 0.0).sum())

    assert abs(pen() - P) < 1e-12
    for k, idx, g in fd_params(net, pen, coords=60, rng=8):
        assert rel_err(grads[k][idx], g) <= 1e-4


def test_rmsprop_step_by_hand():
    net = fixed_net(np.array([[0.5]]), np.array([0.0]), "identity")
    opt = Optimizer([net], kind="rmsprop", lr=0.01)
    g = 0.3
    optimizer_step(opt, [np.array([[g]]), np.array([0.0])])
    expected = 0.5 - 0.01 * g / (np.sqrt((1 - 0.99) * g * g) + 1e-5)
    assert abs(net.weights[0][0, 0] - expected) < 1e-15
    assert net.biases[0][0] == 0.0


def test_adam_step_by_hand():
    net = fixed_net(np.array([[0.5]]), np.array([0.0]), "identity")
    opt = Optimizer([net], kind="adam", lr=0.01)
    g = -0.7
    opt.step([np.array([[g]]), np.array([0.0])])
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    assert abs(net.weights[0][0, 0] - (0.5 - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8))) < 1e-15


@pytest.mark.parametrize("kind", ["rmsprop", "adam"])
def test_zero_gradient_is_noop(kind):
    net = Mlp([3, 4, 2], ["relu", "identity"], rng=0)
    before = [p.copy() for p in net.params()]
    opt = Optimizer([net], kind=kind)
    opt.step([np.zeros_like(p) for p in net.params()])
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_nan_gradient_raises():
    net = Mlp([2, 2], ["identity"], rng=0)
    opt = Optimizer([net])
    with pytest.raises(TrainingError, match="parameter 0"):
        opt.step([np.full((2, 2), np.nan), np.zeros(2)])


def test_determinism_bit_identical():
    def trajectory(seed):
        rng = np.random.default_rng(seed)
        net = Mlp([4, 8, 1], ["tanh", "identity"], rng=rng)
        opt = Optimizer([net], kind="adam", lr=1e-2)
        for _ in range(20):
            x = rng.normal(size=(6, 4))
            y, cache = net.forward(x)
            grads, _ = net.backward(cache, 2 * (y - 1.0))
            opt.step(grads)
        return np.concatenate([p.ravel() for p in net.params()])

    assert np.array_equal(trajectory(11), trajectory(11))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    nets = {"u": Mlp([5, 7, 3], ["relu", "identity"], rng=rng),
            "f": Mlp([3, 4, 4, 1], ["elu", "elu", "identity"], rng=rng)}
    nets["u"].weights[0][0, 0] = 1.0 / 3.0
    save_checkpoint(tmp_path / "c.txt", nets)
    back = load_checkpoint(tmp_path / "c.txt")
    for name, net in nets.items():
        assert back[name].activations == net.activations
        for a, b in zip(net.params(), back[name].params()):
            assert a.tobytes() == b.tobytes()


def test_all_activation_names_accepted():
    for act in ACTIVATIONS:
        Mlp([2, 2], [act])
    with pytest.raises(ValueError):
        Mlp([2, 2], ["sigmoid"])
