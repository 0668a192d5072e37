"""Small feedforward networks with hand-written reverse-mode gradients.

Everything is float64 numpy.  Networks are evaluated on batches shaped
``(B, in_dim)``; a 1-D input is treated as a batch of one and the output is
squeezed back.

Besides the usual parameter gradients, :meth:`Mlp.backward` returns the
gradient with respect to the input (mixers backpropagate into utilities
through it), and :meth:`Mlp.negative_slope_penalty` differentiates
``sum relu(-dF/dx)`` with respect to parameters and inputs, which the soft
monotonicity regulariser needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "leaky_relu", "elu", "tanh")
LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0


class TrainingError(RuntimeError):
    """Non-finite loss or gradient encountered during an update."""


class StaleCacheError(RuntimeError):
    """A forward cache was used after the network's parameters changed."""


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "elu":
        # max(z, 0) + a*expm1(min(z, 0)) is exact (one term is always 0) and
        # avoids np.where, which dominates the cost at these sizes
        h = np.expm1(np.minimum(z, 0.0))
        h *= ELU_ALPHA
        h += np.maximum(z, 0.0)
        return h
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_inplace(name: str, z: np.ndarray) -> np.ndarray:
    """:func:`_act` that may overwrite ``z``; bit-identical results."""
    if name == "relu":
        return np.maximum(z, 0.0, out=z)
    if name == "elu":
        e = np.expm1(np.minimum(z, 0.0))
        e *= ELU_ALPHA
        np.maximum(z, 0.0, out=z)
        z += e
        return z
    if name == "tanh":
        return np.tanh(z, out=z)
    return _act(name, z)


def _dact(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    # relu'(0) = 0 by convention
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "elu":
        return np.where(z > 0, 1.0, h + ELU_ALPHA)
    if name == "tanh":
        return 1.0 - h * h
    raise ValueError(f"unknown activation {name!r}")


def _d2act(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name in ("identity", "relu", "leaky_relu"):
        return np.zeros_like(z)
    if name == "elu":
        return np.where(z > 0, 0.0, h + ELU_ALPHA)
    if name == "tanh":
        return -2.0 * h * (1.0 - h * h)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class ForwardCache:
    net_id: int
    version: int
    squeeze: bool
    inputs: list  # h_{l-1} for each layer
    pre: list  # z_l
    post: list  # h_l


class Mlp:
    """Dense network ``x -> act_L(W_L ... act_1(W_1 x + b_1) ... + b_L)``.

    Args:
        sizes: layer widths ``[in, h1, ..., out]``.
        activations: one activation name per affine layer.
        rng: generator used for the uniform fan-in initialisation.
    """

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], rng=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(activations) != len(sizes) - 1:
            raise ValueError(f"{len(sizes) - 1} layers but {len(activations)} activations")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        rng = np.random.default_rng(rng)
        self.activations = list(activations)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def weight_mask(self) -> list[bool]:
        """Parallels :meth:`params`; True for weight matrices."""
        return [True, False] * len(self.weights)

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def touch(self) -> None:
        """Invalidate outstanding forward caches after an in-place update."""
        self.version += 1

    def copy(self) -> "Mlp":
        new = object.__new__(Mlp)
        new.activations = list(self.activations)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new.version = 0
        return new

    def load_from(self, other: "Mlp") -> None:
        if other.sizes != self.sizes:
            raise ValueError(f"shape mismatch {other.sizes} vs {self.sizes}")
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src
        self.activations = list(other.activations)
        self.touch()

    # -- evaluation ---------------------------------------------------------

    def __call__(self, x) -> np.ndarray:
        """Inference only: same values as :meth:`forward`, no cache, fewer temporaries."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got shape {x.shape}")
        for w, b, name in zip(self.weights, self.biases, self.activations):
            z = h @ w.T
            z += b
            h = _act_inplace(name, z)
        return h[0] if squeeze else h

    def forward(self, x) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got shape {x.shape}")
        inputs, pre, post = [], [], []
        for w, b, name in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ w.T + b
            h = _act(name, z)
            pre.append(z)
            post.append(h)
        cache = ForwardCache(id(self), self.version, squeeze, inputs, pre, post)
        return (h[0] if squeeze else h), cache

    def _check_cache(self, cache: ForwardCache) -> None:
        if cache.net_id != id(self) or cache.version != self.version:
            raise StaleCacheError("forward cache does not match current parameters")

    def backward(self, cache: ForwardCache, dy) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(dy * y)`` w.r.t. parameters and input."""
        self._check_cache(cache)
        g = np.asarray(dy, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for l in range(len(self.weights) - 1, -1, -1):
            gz = g * _dact(self.activations[l], cache.pre[l], cache.post[l])
            grads[2 * l] = gz.T @ cache.inputs[l]
            grads[2 * l + 1] = gz.sum(axis=0)
            g = gz @ self.weights[l]
        return grads, (g[0] if cache.squeeze else g)

    def input_gradient(self, x) -> np.ndarray:
        """``dF/dx`` for a scalar-output network, shape ``(B, in)``."""
        if self.output_dim != 1:
            raise ValueError("input_gradient needs a scalar-output network")
        y, cache = self.forward(x)
        _, dx = self.backward(cache, np.ones_like(y))
        return dx

    def negative_slope_penalty(self, x) -> tuple[float, list[np.ndarray], np.ndarray]:
        """``P = sum_b sum_k relu(-dF/dx_k)`` and its gradients.

        Returns ``(P, param_grads, dP/dx)``.  Since ``P = c . dF/dx`` with
        the locally constant direction ``c = -1[dF/dx < 0]``, P is a
        directional derivative; it is computed by a tangent (forward-mode)
        sweep and then differentiated by reverse mode through both the
        primal and tangent chains.
        """
        if self.output_dim != 1:
            raise ValueError("penalty needs a scalar-output network")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y, cache = self.forward(x)
        _, gx = self.backward(cache, np.ones_like(y))
        c = -(gx < 0).astype(np.float64)
        L = len(self.weights)
        # tangent sweep
        tan_in, tan_z, dacts = [], [], []
        t = c
        for l in range(L):
            tan_in.append(t)
            zt = t @ self.weights[l].T
            d = _dact(self.activations[l], cache.pre[l], cache.post[l])
            tan_z.append(zt)
            dacts.append(d)
            t = d * zt
        penalty = float(t.sum())
        grads: list[np.ndarray] = [None] * (2 * L)
        a_bar = np.ones_like(t)  # adjoint of tangent output
        h_bar = np.zeros_like(t)  # adjoint of primal output
        for l in range(L - 1, -1, -1):
            name = self.activations[l]
            zt_bar = a_bar * dacts[l]
            z_bar = a_bar * tan_z[l] * _d2act(name, cache.pre[l], cache.post[l])
            z_bar = z_bar + h_bar * dacts[l]
            w = self.weights[l]
            grads[2 * l] = zt_bar.T @ tan_in[l] + z_bar.T @ cache.inputs[l]
            grads[2 * l + 1] = z_bar.sum(axis=0)
            a_bar = zt_bar @ w
            h_bar = z_bar @ w
        return penalty, grads, h_bar


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, cache: ForwardCache, dy):
    return net.backward(cache, dy)


def relu_project(net: Mlp) -> Mlp:
    """Clamp every weight matrix (not the biases) to be nonnegative."""
    for w in net.weights:
        np.maximum(w, 0.0, out=w)
    net.touch()
    return net


def min_weight(net: Mlp) -> float:
    return float(min(w.min() for w in net.weights))


# -- optimisers --------------------------------------------------------------

class Optimizer:
    """RMSProp or Adam over the parameters of a list of networks.

    RMSProp follows the common ``v = a v + (1-a) g^2; p -= lr g / (sqrt(v) + eps)``
    form; Adam uses bias-corrected moments.  The parameters of all nets are
    packed into one contiguous buffer (each net's arrays become views into
    it) so an update is a handful of vector operations.
    """

    def __init__(
        self,
        nets: Sequence[Mlp],
        kind: str = "rmsprop",
        lr: float = 5e-4,
        alpha: float = 0.99,
        eps: float | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        max_grad_norm: float | None = None,
    ):
        if kind not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.nets = list(nets)
        if len({id(net) for net in self.nets}) != len(self.nets):
            raise ValueError("each net may appear only once")
        self.kind = kind
        self.lr = float(lr)
        self.alpha = alpha
        self.eps = eps if eps is not None else (1e-5 if kind == "rmsprop" else 1e-8)
        self.beta1, self.beta2 = beta1, beta2
        self.max_grad_norm = max_grad_norm
        self.shapes = [p.shape for net in self.nets for p in net.params()]
        self.flat = np.concatenate([p.ravel() for net in self.nets for p in net.params()]) \
            if self.shapes else np.zeros(0)
        self.params = []
        off = 0
        for net in self.nets:
            for l in range(len(net.weights)):
                for store in (net.weights, net.biases):
                    size = store[l].size
                    store[l] = self.flat[off:off + size].reshape(store[l].shape)
                    off += size
                self.params.extend((net.weights[l], net.biases[l]))
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self.t = 0

    def _check_grads(self, grads) -> np.ndarray:
        if len(grads) != len(self.params):
            raise ValueError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for k, (g, shape) in enumerate(zip(grads, self.shapes)):
            if g.shape != shape:
                raise ValueError(f"gradient {k} has shape {g.shape}, parameter {shape}")
        g = np.concatenate([np.ravel(x) for x in grads]) if grads else np.zeros(0)
        if not np.all(np.isfinite(g)):
            bad = next(k for k, x in enumerate(grads) if not np.all(np.isfinite(x)))
            raise TrainingError(f"non-finite gradient in parameter {bad} (shape {self.shapes[bad]})")
        return g

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if any(a is not b for a, b in zip(self.params, (p for net in self.nets for p in net.params()))):
            raise RuntimeError("network parameters were rebound since this optimizer was built")
        g = self._check_grads(grads)
        if self.max_grad_norm is not None:
            norm = float(np.sqrt(g @ g))
            if norm > self.max_grad_norm:
                g = g * (self.max_grad_norm / (norm + 1e-12))
        self.t += 1
        if self.kind == "rmsprop":
            a = self.alpha
            self.v *= a
            self.v += (1.0 - a) * g * g
            self.flat -= self.lr * g / (np.sqrt(self.v) + self.eps)
        else:
            b1, b2 = self.beta1, self.beta2
            c1 = 1.0 - b1 ** self.t
            c2 = 1.0 - b2 ** self.t
            self.m *= b1
            self.m += (1.0 - b1) * g
            self.v *= b2
            self.v += (1.0 - b2) * g * g
            self.flat -= self.lr * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)
        for net in self.nets:
            net.touch()


def optimizer_step(opt: Optimizer, grads) -> None:
    opt.step(grads)


# -- checkpoints -------------------------------------------------------------
#
# Text format, version 1:
#   lomaq-ckpt 1
#   net <name> <n_layers>
#   layer <in> <out> <activation>
#   W <in*out float.hex values, row-major>
#   b <out float.hex values>
# float.hex makes the round trip bit-exact.

CKPT_MAGIC = "lomaq-ckpt"
CKPT_VERSION = 1


def save_checkpoint(path, nets: dict) -> None:
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}"]
    for name, net in nets.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"net name {name!r} contains whitespace")
        lines.append(f"net {name} {len(net.weights)}")
        for w, b, act in zip(net.weights, net.biases, net.activations):
            lines.append(f"layer {w.shape[1]} {w.shape[0]} {act}")
            lines.append("W " + " ".join(float(v).hex() for v in w.ravel()))
            lines.append("b " + " ".join(float(v).hex() for v in b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if int(head[1]) != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {head[1]}")
    nets, k = {}, 1
    while k < len(lines):
        tok = lines[k].split()
        k += 1
        if not tok:
            continue
        if tok[0] != "net":
            raise ValueError(f"{path}:{k}: expected 'net', got {tok[0]!r}")
        name, n_layers = tok[1], int(tok[2])
        net = object.__new__(Mlp)
        net.weights, net.biases, net.activations, net.version = [], [], [], 0
        for _ in range(n_layers):
            _, fan_in, fan_out, act = lines[k].split()
            fan_in, fan_out = int(fan_in), int(fan_out)
            wvals = lines[k + 1].split()[1:]
            bvals = lines[k + 2].split()[1:]
            k += 3
            w = np.array([float.fromhex(v) for v in wvals], dtype=np.float64)
            net.weights.append(w.reshape(fan_out, fan_in))
            net.biases.append(np.array([float.fromhex(v) for v in bvals], dtype=np.float64))
            net.activations.append(act)
        nets[name] = net
    return nets
