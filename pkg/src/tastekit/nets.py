"""Minimal dense networks with manual backprop (internal support module).

An :class:`Mlp` maps R^in -> R^out through hidden layers with a shared
activation and a linear output layer.  Besides the forward pass it provides
the three derivative passes the rest of the package is built on:

- ``input_backward``    reverse mode: gradient of a scalar in the outputs
                        with respect to the input
- ``tangent_forward``   forward mode: directional derivative of the outputs
- ``tangent_backward``  forward-over-reverse: directional derivative of the
                        input gradient, i.e. exact Hessian-vector products

ReLU uses the almost-everywhere convention: derivative 0 at the kink,
second derivative 0 everywhere.
"""

from __future__ import annotations

import numpy as np

from .numkit import Rng


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_d1(z):
    return (z > 0.0).astype(np.float64)


def _relu_d2(z):
    return np.zeros_like(z)


def _tanh_d1(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_d2(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_d2(z):
    s = _sigmoid(z)
    return s * (1.0 - s)


ACTIVATIONS = {
    "relu": (_relu, _relu_d1, _relu_d2),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2),
    "softplus": (_softplus, _sigmoid, _softplus_d2),
}


class Mlp:
    """Dense network with hidden activation ``activation`` and linear output.

    ``weights[l]`` has shape (width_{l+1}, width_l); the activation is applied
    after every layer except the last.
    """

    def __init__(self, weights, biases, activation: str):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("weights and biases must be non-empty, equal-length lists")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError("inconsistent layer shapes")
        self.activation = activation
        self._act, self._act_d1, self._act_d2 = ACTIVATIONS[activation]

    @classmethod
    def glorot(cls, widths, activation: str, rng: Rng) -> "Mlp":
        """Seeded uniform init in +/- sqrt(6 / (fan_in + fan_out))."""
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append((rng.uniform((fan_out, fan_in)) * 2.0 - 1.0) * bound)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def forward_cache(self, x: np.ndarray):
        """Outputs plus per-hidden-layer pre-activations and activations."""
        pre, act = [], [x]
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w.T + b
            a = self._act(z)
            pre.append(z)
            act.append(a)
        out = a @ self.weights[-1].T + self.biases[-1]
        return out, pre, act

    def apply(self, x: np.ndarray) -> np.ndarray:
        out, _, _ = self.forward_cache(x)
        return out

    def input_backward(self, pre, dout: np.ndarray) -> np.ndarray:
        """Gradient of sum(dout * outputs) with respect to the input batch."""
        delta = dout @ self.weights[-1]
        for z, w in zip(reversed(pre), reversed(self.weights[:-1])):
            delta = (self._act_d1(z) * delta) @ w
        return delta

    def tangent_forward(self, pre, v: np.ndarray):
        """Directional derivative of the outputs along input tangents v."""
        a_dot = v
        pre_dot = []
        for z, w in zip(pre, self.weights[:-1]):
            z_dot = a_dot @ w.T
            pre_dot.append(z_dot)
            a_dot = self._act_d1(z) * z_dot
        return a_dot @ self.weights[-1].T, pre_dot

    def tangent_backward(self, pre, pre_dot, dout: np.ndarray, dout_dot: np.ndarray) -> np.ndarray:
        """Directional derivative of ``input_backward``: exact HVP columns."""
        delta = dout @ self.weights[-1]
        delta_dot = dout_dot @ self.weights[-1]
        for z, z_dot, w in zip(reversed(pre), reversed(pre_dot), reversed(self.weights[:-1])):
            d1 = self._act_d1(z)
            g_dot = self._act_d2(z) * z_dot * delta + d1 * delta_dot
            delta = (d1 * delta) @ w
            delta_dot = g_dot @ w
        return delta_dot

    def param_gradients(self, pre, act, dout: np.ndarray):
        """Backprop of sum(dout * outputs) into weights and biases."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = dout
        for l in range(len(self.weights) - 1, -1, -1):
            grads_w[l] = delta.T @ act[l]
            grads_b[l] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l]) * self._act_d1(pre[l - 1])
        return grads_w, grads_b

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "activation": self.activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        widths = d["widths"]
        weights = [
            np.asarray(flat, dtype=np.float64).reshape(widths[i + 1], widths[i])
            for i, flat in enumerate(d["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        return cls(weights, biases, d["activation"])


class Sgd:
    """Plain gradient descent."""

    def __init__(self, learning_rate: float):
        self.lr = learning_rate

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    """Adam with bias correction (Kingma & Ba defaults unless overridden)."""

    def __init__(self, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = None
        self._v = None

    def step(self, params, grads):
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def make_optimizer(name: str, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
    if name == "sgd":
        return Sgd(learning_rate)
    if name == "adam":
        return Adam(learning_rate, beta1, beta2, eps)
    raise ValueError(f"unknown optimizer {name!r}")
