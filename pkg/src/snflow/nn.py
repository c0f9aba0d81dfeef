"""Dense feed-forward networks with hand-written reverse mode, and Adam.

Parameters are flattened layer-major, weights (row-major, shape ``(fan_in,
fan_out)``) before biases. Every optimizer, serializer and finite-difference
test uses that ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

# activation tag -> (f, f' expressed through the output f(x))
ACTIVATIONS = {
    "tanh": (np.tanh, lambda out: 1.0 - out * out),
    "identity": (lambda z: z, lambda out: np.ones_like(out)),
}


@dataclass
class GradBundle:
    grad_input: np.ndarray
    grad_params: np.ndarray


class DenseNet:
    """MLP with a smooth activation on hidden layers and a linear output layer.

    Inputs may be a single vector ``(d,)`` or a batch ``(n, d)``.
    """

    def __init__(self, layer_sizes, weights, biases, activation="tanh"):
        layer_sizes = [int(s) for s in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(weights) != len(layer_sizes) - 1 or len(biases) != len(weights):
            raise ValueError("need one weight matrix and bias per layer")
        for k, (w, b) in enumerate(zip(weights, biases)):
            shape = (layer_sizes[k], layer_sizes[k + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {k}: expected weight {shape}, got {w.shape}")
        self.layer_sizes = layer_sizes
        self.activation = activation
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("non-finite parameters")
        pos = 0
        for k, w in enumerate(self.weights):
            self.weights[k] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            nb = self.biases[k].size
            self.biases[k] = flat[pos:pos + nb].copy()
            pos += nb

    def copy(self) -> "DenseNet":
        return DenseNet(self.layer_sizes, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.activation)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_size or x.ndim not in (1, 2):
            raise ValueError(f"expected input of size {self.input_size}, got shape {x.shape}")
        return x

    def forward(self, x):
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x):
        """Forward pass that also returns the activations needed by :meth:`backward`."""
        x = self._check_input(x)
        single = x.ndim == 1
        h = x[None, :] if single else x
        act = ACTIVATIONS[self.activation][0]
        acts = [h]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = act(h)
            acts.append(h)
        out = h[0] if single else h
        return out, (single, acts)

    def backward(self, cache, upstream) -> GradBundle:
        """Vector-Jacobian products for the input and the flat parameters.

        For a batch, parameter gradients are summed over the batch.
        """
        single, acts = cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {g.shape} does not match output {acts[-1].shape}")
        dact = ACTIVATIONS[self.activation][1]
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k < last:
                g = g * dact(acts[k + 1])
            grads_w[k] = acts[k].T @ g
            grads_b[k] = g.sum(axis=0)
            g = g @ self.weights[k].T
        parts = []
        for gw, gb in zip(grads_w, grads_b):
            parts.append(gw.ravel())
            parts.append(gb)
        grad_input = g[0] if single else g
        return GradBundle(grad_input, np.concatenate(parts))

    def vjp_input(self, x, upstream):
        """Input gradient of ``upstream . net(x)`` (skips parameter gradients)."""
        _, (single, acts) = self.forward_cached(x)
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        dact = ACTIVATIONS[self.activation][1]
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k < last:
                g = g * dact(acts[k + 1])
            g = g @ self.weights[k].T
        return g[0] if single else g


def net_init(layer_sizes, seed=None, activation="tanh", zero_last=False, rng=None) -> DenseNet:
    """Fan-in scaled Gaussian initialization; biases start at zero.

    ``zero_last`` zeroes the output layer, which makes a coupling subnetwork
    output exactly zero so the block starts as the identity.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for k in range(n_layers):
        fan_in, fan_out = int(layer_sizes[k]), int(layer_sizes[k + 1])
        if zero_last and k == n_layers - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return DenseNet(layer_sizes, weights, biases, activation)


def net_forward(net: DenseNet, x):
    return net.forward(x)


def net_backward(net: DenseNet, x, upstream) -> GradBundle:
    _, cache = net.forward_cached(x)
    return net.backward(cache, upstream)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    @classmethod
    def for_params(cls, n_params: int, **kwargs) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), **kwargs)


def adam_step(state: AdamState, params, grad):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment lengths disagree")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to Adam")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, step=step, m=m, v=v)


def save_net(net: DenseNet, path) -> None:
    np.savez(Path(path), layer_sizes=np.array(net.layer_sizes),
             activation=np.array(net.activation), params=net.get_params())


def load_net(path) -> DenseNet:
    with np.load(Path(path)) as data:
        sizes = [int(s) for s in data["layer_sizes"]]
        net = net_init(sizes, seed=0, activation=str(data["activation"]))
        net.set_params(data["params"])
    return net
