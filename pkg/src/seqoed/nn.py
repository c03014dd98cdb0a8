"""Minimal reverse-mode autodiff for dense feed-forward networks.

The package's networks are all chains of affine layers with elementwise or
row-wise activations, so instead of a general tape graph this module
implements exactly that: :func:`forward` records per-layer post-activations
into a :class:`GradientTape`, and :func:`backward` walks the chain in
reverse, returning parameter gradients plus the gradient with respect to the
input (needed both for chaining composite models and for differentiating a
critic with respect to its design input).  Everything is float64.

Supported activations: ``relu``, ``sigmoid``, ``identity``, ``softmax``,
``logsoftmax`` (the last two are row-wise).

Initialization: Kaiming-uniform (``U(+-sqrt(6/fan_in))``) for layers feeding
a ReLU, Xavier-uniform (``U(+-sqrt(6/(fan_in+fan_out)))``) otherwise; biases
start at zero so a freshly built net is an exactly symmetric function of a
zero input.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .serialization import read_blob, write_blob

ACTIVATIONS = ("relu", "sigmoid", "identity", "softmax", "logsoftmax")


class DenseNet:
    """A chain of affine layers with fixed activations."""

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations)):
            raise ValueError("weights, biases, activations must align")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, sizes, activations, rng: np.random.Generator):
        """Build a net with layer widths ``sizes`` (len L+1) and L activations."""
        if len(sizes) != len(activations) + 1:
            raise ValueError("need len(sizes) == len(activations) + 1")
        weights, biases = [], []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act == "relu":
                bound = math.sqrt(6.0 / max(fan_in, 1))
            else:
                bound = math.sqrt(6.0 / max(fan_in + fan_out, 1))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activations)

    # -- introspection ------------------------------------------------------

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @property
    def sizes(self):
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def params(self):
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (live views)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params):
        params = list(params)
        if len(params) != 2 * len(self.weights):
            raise ValueError("parameter count mismatch")
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[2 * i], dtype=np.float64)
            self.biases[i] = np.asarray(params[2 * i + 1], dtype=np.float64)

    def copy(self):
        return DenseNet([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases],
                        list(self.activations))

    def spec(self):
        return {"sizes": self.sizes, "activations": list(self.activations)}


class GradientTape:
    """Forward-pass record consumed exactly once by :func:`backward`."""

    __slots__ = ("x", "post", "squeezed", "consumed")

    def __init__(self, x, post, squeezed):
        self.x = x
        self.post = post
        self.squeezed = squeezed
        self.consumed = False


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return expit(z)
    if act == "identity":
        return z
    if act == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    if act == "logsoftmax":
        shifted = z - z.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    raise ValueError(f"unknown activation {act!r}")


def _activation_backward(d_post, post, act):
    if act == "relu":
        return d_post * (post > 0.0)
    if act == "sigmoid":
        return d_post * post * (1.0 - post)
    if act == "identity":
        return d_post
    if act == "softmax":
        inner = (d_post * post).sum(axis=1, keepdims=True)
        return post * (d_post - inner)
    if act == "logsoftmax":
        s = np.exp(post)
        return d_post - s * d_post.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown activation {act!r}")


def forward(net: DenseNet, x):
    """Run the net on ``x`` (n, in_dim) or (in_dim,); returns (out, tape)."""
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.shape[1] != net.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != net in_dim {net.in_dim}")
    post = []
    a = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ w + b
        a = _activate(z, act)
        post.append(a)
    tape = GradientTape(x, post, squeezed)
    out = a[0] if squeezed else a
    return out, tape


def backward(net: DenseNet, tape: GradientTape, d_out):
    """Backpropagate ``d_out`` through the recorded pass.

    Returns ``(grads, d_x)`` where ``grads`` aligns with ``net.params()``.
    A tape can be consumed only once; reuse raises ``RuntimeError``.
    """
    if tape.consumed:
        raise RuntimeError("GradientTape already consumed; rerun forward()")
    tape.consumed = True
    d_post = np.asarray(d_out, dtype=np.float64)
    if tape.squeezed and d_post.ndim == 1:
        d_post = d_post[None, :]
    if d_post.shape != tape.post[-1].shape:
        raise ValueError("d_out shape mismatch with forward output")
    grads = [None] * (2 * len(net.weights))
    for layer in range(len(net.weights) - 1, -1, -1):
        post = tape.post[layer]
        d_z = _activation_backward(d_post, post, net.activations[layer])
        a_prev = tape.x if layer == 0 else tape.post[layer - 1]
        grads[2 * layer] = a_prev.T @ d_z
        grads[2 * layer + 1] = d_z.sum(axis=0)
        d_post = d_z @ net.weights[layer].T
    d_x = d_post[0] if tape.squeezed else d_post
    return grads, d_x


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


class AdamState:
    """First/second-moment accumulators for a flat parameter list."""

    def __init__(self, m, v, t=0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = m
        self.v = v
        self.t = int(t)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params],
                   0, beta1, beta2, eps)


def adam_step(params, grads, state: AdamState, lr):
    """One Adam update (in place) ascending along ``-grads`` (i.e. minimizing)."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("params/grads/state length mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def soft_update(target_params, source_params, rate):
    """Polyak update ``t <- (1-rate) t + rate s`` in place."""
    if len(target_params) != len(source_params):
        raise ValueError("parameter list length mismatch")
    for t, s in zip(target_params, source_params):
        t *= 1.0 - rate
        t += rate * s


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_net(path, net: DenseNet, extra: dict | None = None):
    """Write a single net as a blob (JSON header + flat float64 arrays)."""
    header = {"kind": "dense-net", "spec": net.spec()}
    if extra:
        header["extra"] = extra
    write_blob(path, header, net.params())


def load_net(path) -> DenseNet:
    header, arrays = read_blob(path)
    if header.get("kind") != "dense-net":
        raise ValueError(f"{path}: not a dense-net blob")
    return net_from_spec(header["spec"], arrays)


def net_from_spec(spec: dict, arrays) -> DenseNet:
    sizes = spec["sizes"]
    acts = spec["activations"]
    net = DenseNet.create(sizes, acts, np.random.default_rng(0))
    net.set_params([np.asarray(a, dtype=np.float64) for a in arrays])
    expect = [(sizes[i], sizes[i + 1]) for i in range(len(acts))]
    for (fi, fo), w in zip(expect, net.weights):
        if w.shape != (fi, fo):
            raise ValueError("array shapes do not match declared spec")
    return net


def check_finite(grads, context=""):
    """Raise with a diagnostic if any gradient entry is non-finite."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient encountered {context}")
