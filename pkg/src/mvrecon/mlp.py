"""Small fully-connected networks with hand-written backprop.

The decoders in this package are plain MLPs evaluated inside a
Gauss-Newton loop, so we need exact analytic derivatives with respect
to inputs as well as parameters, plus deterministic evaluation. A
minimal dense net in numpy keeps all of that explicit and dependency
free; everything runs in float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_ACTIVATIONS = ("relu", "softplus", "tanh")


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def _dact(name, x):
    # derivative as a function of the pre-activation
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "softplus":
        return expit(x)
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    raise ValueError(f"unknown activation {name!r}")


class DenseNet:
    """Feed-forward net; activation after every layer except the last."""

    def __init__(self, layer_sizes, activation="relu", rng=None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            std = np.sqrt(2.0 / n_in)
            self.weights.append(rng.normal(0.0, std, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def forward(self, x):
        """x (batch, in) -> (batch, out)."""
        h = np.asarray(x, dtype=np.float64)
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = _act(self.activation, h)
        return h

    def forward_cache(self, x):
        """Forward pass keeping pre-activations for backward()."""
        h = np.asarray(x, dtype=np.float64)
        inputs = [h]  # post-activation input of each layer
        pre = []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            pre.append(a)
            h = _act(self.activation, a) if i != last else a
            if i != last:
                inputs.append(h)
        return h, (inputs, pre)

    def backward(self, cache, grad_out, need_param_grads=True):
        """Backprop a (batch, out) upstream gradient.

        Returns (grad_input (batch, in), [(dW, db), ...] or None).
        """
        inputs, pre = cache
        g = np.asarray(grad_out, dtype=np.float64)
        param_grads = [None] * self.n_layers if need_param_grads else None
        for i in range(self.n_layers - 1, -1, -1):
            if i != self.n_layers - 1:
                g = g * _dact(self.activation, pre[i])
            if need_param_grads:
                param_grads[i] = (inputs[i].T @ g, g.sum(axis=0))
            g = g @ self.weights[i].T
        return g, param_grads

    def input_jacobian(self, x):
        """Exact d(out)/d(in), shape (batch, out, in), by forward mode."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        batch, n_in = x.shape
        h = x
        # tangents: (batch, n_in, width)
        tang = np.broadcast_to(np.eye(n_in), (batch, n_in, n_in)).copy()
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            tang = tang @ w
            if i != last:
                tang = tang * _dact(self.activation, a)[:, None, :]
                h = _act(self.activation, a)
            else:
                h = a
        return np.swapaxes(tang, 1, 2)

    # -- parameter-vector helpers (checkpointing, tests) --

    def get_params(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]

    def set_params(self, weights, biases):
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError("parameter shape mismatch")
            self.weights[i] = np.asarray(w, dtype=np.float64).copy()
            self.biases[i] = np.asarray(b, dtype=np.float64).copy()


class Adam:
    """Adam over a flat list of arrays (updated in place)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
