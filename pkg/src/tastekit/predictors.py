"""Feed-forward predictors with exact input derivatives and a training loop.

A predictor exposes a scalar output f(x) together with its exact input
gradient and input Laplacian.  Second derivatives come from a
forward-over-reverse pass (one tangent sweep per input coordinate), so the
Laplacian and the Hessian diagonal are exact up to floating rounding, with
the almost-everywhere convention at ReLU kinks.

For a piecewise-affine (ReLU or hidden-layer-free) backbone with a softmax
head, all curvature of f_k = softmax_k(z(x)) lives in the head, and the
Laplacian reduces to first-order logit gradients contracted with the
analytic softmax Hessian

    d2 sigma_k / dz_i dz_j
        = sigma_k [ (delta_ki - sigma_i)(delta_kj - sigma_j)
                    - delta_ij sigma_i + sigma_i sigma_j ].

``input_laplacian_softmax_shortcut`` implements that route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .nets import Mlp, make_optimizer
from .numkit import Rng, as_points

EXACT_HESSIAN_DIM_LIMIT = 64


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _maybe_scalar(values: np.ndarray, was_single: bool):
    return float(values[0]) if was_single and values.ndim == 1 else (
        values[0] if was_single else values
    )


class MlpPredictor:
    """MLP with a linear-scalar or softmax head.

    For a softmax head, scalar diagnostics use class ``selected_class``;
    ``None`` means the predicted class (argmax of the logits) per sample.
    """

    def __init__(self, net: Mlp, head: str = "linear", selected_class: int | None = None):
        if head not in ("linear", "softmax"):
            raise ValueError(f"unknown head {head!r}")
        if head == "linear" and net.out_dim != 1:
            raise ValueError("linear-scalar head requires a single output")
        if head == "softmax":
            if net.out_dim < 2:
                raise ValueError("softmax head requires at least two logits")
            if selected_class is not None and not 0 <= selected_class < net.out_dim:
                raise ValueError("selected class out of range")
        self.net = net
        self.head = head
        self.selected_class = selected_class

    @classmethod
    def linear(cls, w, b: float = 0.0) -> "MlpPredictor":
        """Affine predictor f(x) = w . x + b."""
        w = np.asarray(w, dtype=np.float64)
        return cls(Mlp([w[None, :]], [np.asarray([b])], "relu"), head="linear")

    @classmethod
    def build(
        cls,
        dim: int,
        hidden,
        activation: str,
        rng: Rng,
        head: str = "linear",
        n_classes: int = 1,
        selected_class: int | None = None,
    ) -> "MlpPredictor":
        out = 1 if head == "linear" else n_classes
        net = Mlp.glorot([dim, *hidden, out], activation, rng)
        return cls(net, head=head, selected_class=selected_class)

    @property
    def dim(self) -> int:
        return self.net.in_dim

    @property
    def n_classes(self) -> int:
        return self.net.out_dim

    def _selected(self, logits: np.ndarray) -> np.ndarray:
        if self.head == "linear":
            return np.zeros(logits.shape[0], dtype=np.intp)
        if self.selected_class is None:
            return logits.argmax(axis=1)
        return np.full(logits.shape[0], self.selected_class, dtype=np.intp)

    def _head_grad(self, logits: np.ndarray, k: np.ndarray):
        """d(selected output)/d(logits), plus softmax probabilities if any."""
        n = logits.shape[0]
        if self.head == "linear":
            return np.ones((n, 1)), None
        sig = softmax(logits)
        sk = sig[np.arange(n), k]
        dout = -sig * sk[:, None]
        dout[np.arange(n), k] += sk
        return dout, sig

    def _head_hess_mv(self, sig: np.ndarray, k: np.ndarray, zdot: np.ndarray) -> np.ndarray:
        """Softmax-Hessian times logit tangents, without forming the matrix."""
        n = sig.shape[0]
        idx = np.arange(n)
        sk = sig[idx, k]
        s_dot = (sig * zdot).sum(axis=1)
        zk = zdot[idx, k]
        a = -sig.copy()
        a[idx, k] += 1.0
        out = a * (zk - s_dot)[:, None] - sig * zdot + sig * s_dot[:, None]
        return out * sk[:, None]

    def logits(self, x):
        pts = as_points(x, self.dim)
        return self.net.apply(pts)

    def forward(self, x):
        """Selected scalar output; softmax heads return a probability."""
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        z = self.net.apply(pts)
        if self.head == "linear":
            vals = z[:, 0]
        else:
            sig = softmax(z)
            vals = sig[np.arange(len(pts)), self._selected(z)]
        return _maybe_scalar(vals, single)

    def input_gradient(self, x):
        """Exact reverse-mode gradient of the selected output w.r.t. x."""
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        z, pre, _ = self.net.forward_cache(pts)
        dout, _ = self._head_grad(z, self._selected(z))
        grads = self.net.input_backward(pre, dout)
        return grads[0] if single else grads

    def hvp(self, x, v):
        """Exact input-Hessian-vector products, one tangent per point."""
        pts = as_points(x, self.dim)
        tangents = as_points(v, self.dim)
        if tangents.shape[0] == 1 and pts.shape[0] > 1:
            tangents = np.broadcast_to(tangents, pts.shape)
        z, pre, _ = self.net.forward_cache(pts)
        k = self._selected(z)
        dout, sig = self._head_grad(z, k)
        zdot, pre_dot = self.net.tangent_forward(pre, tangents)
        if self.head == "linear":
            dout_dot = np.zeros_like(zdot)
        else:
            dout_dot = self._head_hess_mv(sig, k, zdot)
        return self.net.tangent_backward(pre, pre_dot, dout, dout_dot)

    def _second_order(self, pts: np.ndarray, want_diag: bool):
        d = self.dim
        if d > EXACT_HESSIAN_DIM_LIMIT:
            raise ConfigError(
                f"exact Hessian route limited to d <= {EXACT_HESSIAN_DIM_LIMIT}: "
                "use hutchinson route"
            )
        z, pre, _ = self.net.forward_cache(pts)
        k = self._selected(z)
        dout, sig = self._head_grad(z, k)
        lap = np.zeros(pts.shape[0])
        diag = np.zeros_like(pts) if want_diag else None
        basis = np.zeros_like(pts)
        for i in range(d):
            basis[:, :] = 0.0
            basis[:, i] = 1.0
            zdot, pre_dot = self.net.tangent_forward(pre, basis)
            if self.head == "linear":
                dout_dot = np.zeros_like(zdot)
            else:
                dout_dot = self._head_hess_mv(sig, k, zdot)
            col = self.net.tangent_backward(pre, pre_dot, dout, dout_dot)
            lap += col[:, i]
            if want_diag:
                diag[:, i] = col[:, i]
        return lap, diag

    def input_laplacian_exact(self, x):
        """Trace of the exact input Hessian (column-by-column tangents)."""
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        lap, _ = self._second_order(pts, want_diag=False)
        return _maybe_scalar(lap, single)

    def hessian_diagonal(self, x):
        """Exact diagonal entries d2 f / dx_i^2, needed per-dimension."""
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        _, diag = self._second_order(pts, want_diag=True)
        return diag[0] if single else diag

    def input_laplacian_softmax_shortcut(self, x, top_k: int | None = None):
        """Laplacian via logit gradients and the analytic softmax Hessian.

        Valid only for piecewise-affine backbones (ReLU hidden layers or no
        hidden layers) with a softmax head; at such points the backbone
        contributes no curvature almost everywhere.
        """
        if self.head != "softmax":
            raise ConfigError("shortcut requires a softmax head")
        if len(self.net.weights) > 1 and self.net.activation != "relu":
            raise ConfigError("shortcut requires piecewise-affine backbone")
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        n, num_classes = pts.shape[0], self.n_classes
        z, pre, _ = self.net.forward_cache(pts)
        k = self._selected(z)
        sig = softmax(z)
        idx = np.arange(n)
        # Logit Jacobian wrt input: one backward pass per class.
        jac = np.empty((n, num_classes, self.dim))
        unit = np.zeros((n, num_classes))
        for c in range(num_classes):
            unit[:, :] = 0.0
            unit[:, c] = 1.0
            jac[:, c, :] = self.net.input_backward(pre, unit)
        if top_k is not None:
            if top_k < 1:
                raise ConfigError("top-k truncation must be positive")
            keep = np.zeros((n, num_classes), dtype=bool)
            order = np.argsort(z, axis=1)[:, ::-1][:, :top_k]
            keep[idx[:, None], order] = True
            keep[idx, k] = True
        else:
            keep = np.ones((n, num_classes), dtype=bool)
        sig_m = np.where(keep, sig, 0.0)
        a = -sig_m
        a[idx, k] += keep[idx, k]
        u = np.einsum("nc,ncd->nd", a, jac)
        w = np.einsum("nc,ncd->nd", sig_m, jac)
        row_sq = np.einsum("ncd,ncd->nc", jac, jac)
        lap = sig[idx, k] * (
            np.einsum("nd,nd->n", u, u)
            - (sig_m * row_sq).sum(axis=1)
            + np.einsum("nd,nd->n", w, w)
        )
        return _maybe_scalar(lap, single)

    def to_dict(self) -> dict:
        return {
            "kind": "mlp-predictor",
            "head": self.head,
            "selected_class": self.selected_class,
            **self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpPredictor":
        sel = d.get("selected_class")
        return cls(Mlp.from_dict(d), head=d["head"], selected_class=sel)


class QuadraticPredictor:
    """Analytic predictor f(x) = x^T A x + b . x + c with exact derivatives.

    Mainly a diagnostic test function: its Hessian A + A^T is available in
    closed form, so stochastic Laplacian routes can be checked against truth.
    """

    def __init__(self, a, b=None, c: float = 0.0):
        self.a = np.asarray(a, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValueError("quadratic coefficient must be a square matrix")
        d = self.a.shape[0]
        self.b = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64)
        self.c = float(c)
        self._hess = self.a + self.a.T

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def forward(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        vals = np.einsum("ni,ij,nj->n", pts, self.a, pts) + pts @ self.b + self.c
        return _maybe_scalar(vals, single)

    def input_gradient(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        grads = pts @ self._hess.T + self.b
        return grads[0] if single else grads

    def input_laplacian_exact(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        lap = np.full(pts.shape[0], float(np.trace(self._hess)))
        return _maybe_scalar(lap, single)

    def hessian_diagonal(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        diag = np.broadcast_to(np.diag(self._hess), pts.shape).copy()
        return diag[0] if single else diag

    def hvp(self, x, v):
        pts = as_points(x, self.dim)
        tangents = as_points(v, self.dim)
        if tangents.shape[0] == 1 and pts.shape[0] > 1:
            tangents = np.broadcast_to(tangents, pts.shape)
        return tangents @ self._hess.T

    def to_dict(self) -> dict:
        return {"kind": "quadratic-predictor", "a": self.a.tolist(),
                "b": self.b.tolist(), "c": self.c}


@dataclass
class TrainConfig:
    """Optimisation settings; ``loss`` must match the predictor head."""

    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "mse"
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("mse", "cross-entropy"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "loss": self.loss,
            "seed": self.seed,
        }


def train(predictor: MlpPredictor, x, y, config: TrainConfig) -> list[float]:
    """Train in place; returns the per-epoch mean loss history.

    Deterministic given ``config.seed`` and the initial weights.
    """
    config.validate()
    pts = as_points(x, predictor.dim)
    if pts.shape[0] == 0:
        raise ValueError("empty dataset")
    if config.loss == "mse":
        if predictor.head != "linear":
            raise ConfigError("mse loss requires a linear-scalar head")
        targets = np.asarray(y, dtype=np.float64).ravel()
    else:
        if predictor.head != "softmax":
            raise ConfigError("cross-entropy loss requires a softmax head")
        targets = np.asarray(y).astype(np.intp).ravel()
        if targets.min() < 0 or targets.max() >= predictor.n_classes:
            raise ValueError("class labels out of range")
    if targets.shape[0] != pts.shape[0]:
        raise ValueError("mismatched inputs and targets")

    net = predictor.net
    params = net.weights + net.biases
    opt = make_optimizer(config.optimizer, config.learning_rate,
                         config.beta1, config.beta2, config.eps)
    rng = Rng(config.seed)
    n = pts.shape[0]
    history: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            xb, yb = pts[sel], targets[sel]
            m = len(sel)
            z, pre, act = net.forward_cache(xb)
            if config.loss == "mse":
                err = z[:, 0] - yb
                loss = float(np.mean(err * err))
                dout = np.zeros_like(z)
                dout[:, 0] = 2.0 * err / m
            else:
                sig = softmax(z)
                picked = sig[np.arange(m), yb]
                loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
                dout = sig.copy()
                dout[np.arange(m), yb] -= 1.0
                dout /= m
            gw, gb = net.param_gradients(pre, act, dout)
            opt.step(params, gw + gb)
            epoch_loss += loss * m
        epoch_loss /= n
        if not math.isfinite(epoch_loss):
            raise NumericalError("training diverged")
        history.append(epoch_loss)
    return history
