"""Minimal dense networks with explicit backpropagation, plus Adam."""
from __future__ import annotations

import numpy as np

ACTIVATIONS = ("tanh", "relu")


class MLP:
    """Fully connected network ``x @ W + b`` with a linear output layer.

    ``sizes = [n_in, h_1, ..., n_out]``; ``sizes = [n_in, n_out]`` is affine.
    Parameters are kept in ``self.params`` as ``[W0, b0, W1, b1, ...]`` so that
    optimizers can update them in place.
    """

    def __init__(self, sizes, activation="tanh", rng=None, out_scale=1.0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(rng)
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.params = []
        n_layers = len(self.sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = 1.0 if activation == "tanh" else np.sqrt(2.0)
            scale = gain / np.sqrt(n_in)
            if i == n_layers - 1:
                scale *= out_scale
            self.params.append(rng.normal(0.0, scale, size=(n_in, n_out)))
            self.params.append(np.zeros(n_out))

    @property
    def layers(self):
        return [(self.params[2 * i], self.params[2 * i + 1]) for i in range(len(self.params) // 2)]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def forward(self, x, cache=False):
        h = np.asarray(x, dtype=float)
        acts = [h]
        layers = self.layers
        for i, (W, b) in enumerate(layers):
            z = h @ W + b
            h = z if i == len(layers) - 1 else self._act(z)
            acts.append(h)
        return (h, acts) if cache else h

    __call__ = forward

    def backward(self, acts, grad_out):
        """Gradients of ``sum(grad_out * output)`` w.r.t. every parameter."""
        grads = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=float)
        layers = self.layers
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h_in = acts[i]
            grads[2 * i] = h_in.T @ g if g.ndim == 2 else np.outer(h_in, g)
            grads[2 * i + 1] = g.sum(axis=0) if g.ndim == 2 else g.copy()
            if i > 0:
                g = g @ W.T
                h = acts[i]
                g = g * (1.0 - h * h) if self.activation == "tanh" else g * (h > 0)
        return grads

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.sizes = list(self.sizes)
        new.activation = self.activation
        new.params = [p.copy() for p in self.params]
        return new

    def load(self, other: "MLP") -> None:
        for p, q in zip(self.params, other.params):
            p[...] = q

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activation": self.activation,
            "params": [p.tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d) -> "MLP":
        new = cls.__new__(cls)
        new.sizes = [int(s) for s in d["sizes"]]
        new.activation = d["activation"]
        new.params = [np.asarray(p, dtype=float) for p in d["params"]]
        for i in range(len(new.params) // 2):
            n_in, n_out = new.sizes[i], new.sizes[i + 1]
            new.params[2 * i] = new.params[2 * i].reshape(n_in, n_out)
            new.params[2 * i + 1] = new.params[2 * i + 1].reshape(n_out)
        return new


def clip_grad_norm(grads, max_norm):
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        grads = [g * (max_norm / (total + 1e-12)) for g in grads]
    return grads


class Adam:
    """Adam over a list of arrays, updated in place (descent by default)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, ascent=False, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        sign = 1.0 if ascent else -1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p += sign * lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
