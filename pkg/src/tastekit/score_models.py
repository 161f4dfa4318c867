"""Score fields s(x) = grad log p(x): exact Gaussian families and learned nets.

Closed-form models expose normalised log densities, exact samplers and
analytic scores.  Exponential tilts q(x) proportional to p(x) exp(eps h(x))
keep the score available for any potential h (the normaliser never enters a
gradient); they resolve to an exact sampler whenever the tilt keeps the
family closed (a linear potential shifts Gaussian means and reweights
mixture components), and otherwise expose expectations through
self-normalised importance sampling from the base distribution with an
effective-sample-size guard.

Learned scores are tanh MLPs fitted by denoising score matching: minimise
E || net(x + sigma z) + z / sigma ||^2 over z ~ N(0, I) at a single fixed
noise scale sigma.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import ConfigError, NumericalError
from .nets import Mlp, make_optimizer
from .numkit import Rng, as_points, as_vector, mean_and_stderr
from .predictors import TrainConfig

_LOG_2PI = math.log(2.0 * math.pi)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _maybe_row(values: np.ndarray, was_single: bool):
    return values[0] if was_single else values


class IsotropicGaussian:
    """N(mean, variance * I) with exact score -(x - mean) / variance."""

    def __init__(self, mean, variance: float = 1.0):
        self.mean = as_vector(mean)
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.variance = float(variance)

    @classmethod
    def standard(cls, dim: int) -> "IsotropicGaussian":
        return cls(np.zeros(dim), 1.0)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def score(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        return _maybe_row(-(pts - self.mean) / self.variance, single)

    def log_density(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        sq = ((pts - self.mean) ** 2).sum(axis=1)
        vals = -0.5 * sq / self.variance - 0.5 * self.dim * (_LOG_2PI + math.log(self.variance))
        return float(vals[0]) if single else vals

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        return self.mean + math.sqrt(self.variance) * rng.normal((n, self.dim))

    def to_dict(self) -> dict:
        return {"kind": "isotropic-gaussian", "mean": self.mean.tolist(),
                "variance": self.variance}


class GaussianMixture:
    """Mixture of isotropic Gaussians with exact score via responsibilities."""

    def __init__(self, weights, means, variances):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.variances = np.asarray(variances, dtype=np.float64)
        if self.means.ndim != 2 or len(self.weights) != len(self.means):
            raise ValueError("need one weight and mean per component")
        if self.variances.shape != self.weights.shape or np.any(self.variances <= 0):
            raise ValueError("need one positive variance per component")
        if np.any(self.weights <= 0):
            raise ValueError("component weights must be positive")
        self.weights = self.weights / self.weights.sum()

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _component_logpdf(self, pts: np.ndarray) -> np.ndarray:
        diff = pts[:, None, :] - self.means[None, :, :]
        sq = (diff * diff).sum(axis=2)
        return (-0.5 * sq / self.variances
                - 0.5 * self.dim * (_LOG_2PI + np.log(self.variances)))

    def log_density(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        vals = _logsumexp(np.log(self.weights) + self._component_logpdf(pts), axis=1)
        return float(vals[0]) if single else vals

    def score(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        logp = np.log(self.weights) + self._component_logpdf(pts)
        logp -= logp.max(axis=1, keepdims=True)
        resp = np.exp(logp)
        resp /= resp.sum(axis=1, keepdims=True)
        comp_scores = -(pts[:, None, :] - self.means[None, :, :]) / self.variances[None, :, None]
        return _maybe_row(np.einsum("nk,nkd->nd", resp, comp_scores), single)

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        u = rng.uniform(n)
        idx = np.searchsorted(np.cumsum(self.weights), u)
        idx = np.minimum(idx, len(self.weights) - 1)
        z = rng.normal((n, self.dim))
        return self.means[idx] + np.sqrt(self.variances[idx])[:, None] * z

    def to_dict(self) -> dict:
        return {"kind": "gaussian-mixture", "weights": self.weights.tolist(),
                "means": self.means.tolist(), "variances": self.variances.tolist()}


class Potential:
    """Shift potential h: linear h(x) = c . x  or quadratic h(x) = x^T A x."""

    def __init__(self, kind: str, coeff):
        if kind not in ("linear", "quadratic"):
            raise ValueError(f"unknown potential kind {kind!r}")
        self.kind = kind
        self.coeff = np.asarray(coeff, dtype=np.float64)
        if kind == "linear" and self.coeff.ndim != 1:
            raise ValueError("linear potential needs a coefficient vector")
        if kind == "quadratic":
            if self.coeff.ndim != 2 or self.coeff.shape[0] != self.coeff.shape[1]:
                raise ValueError("quadratic potential needs a square matrix")
            if not np.allclose(self.coeff, self.coeff.T):
                raise ValueError("quadratic potential matrix must be symmetric")

    @classmethod
    def linear(cls, c) -> "Potential":
        return cls("linear", c)

    @classmethod
    def quadratic(cls, a) -> "Potential":
        return cls("quadratic", a)

    @property
    def dim(self) -> int:
        return self.coeff.shape[0]

    def value(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        if self.kind == "linear":
            vals = pts @ self.coeff
        else:
            vals = np.einsum("ni,ij,nj->n", pts, self.coeff, pts)
        return float(vals[0]) if single else vals

    def grad(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        if self.kind == "linear":
            out = np.broadcast_to(self.coeff, pts.shape).copy()
        else:
            out = 2.0 * pts @ self.coeff
        return _maybe_row(out, single)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "coeff": self.coeff.tolist()}


class TiltedScore:
    """Score of q proportional to base * exp(eps * h); the normaliser drops out.

    ``resolve`` returns the closed-form shifted distribution when the family
    is closed under the tilt; otherwise sampling is unavailable and
    ``expectation`` provides importance-weighted estimates.
    """

    def __init__(self, base, potential: Potential, eps: float):
        if potential.dim != base.dim:
            raise ValueError("dimension mismatch between base and potential")
        self.base = base
        self.potential = potential
        self.eps = float(eps)

    @property
    def dim(self) -> int:
        return self.base.dim

    def score(self, x):
        return self.base.score(x) + self.eps * self.potential.grad(x)

    def log_density_unnormalised(self, x):
        """log q up to the additive constant -log Z (never evaluated)."""
        return log_density_up_to_constant(self.base, x) + self.eps * self.potential.value(x)

    def resolve(self):
        """Closed-form resolution for linear tilts of Gaussian families."""
        if self.potential.kind != "linear":
            return None
        c = self.potential.coeff
        base = self.base
        if isinstance(base, TiltedScore):
            base = base.resolve()
            if base is None:
                return None
        if isinstance(base, IsotropicGaussian):
            return IsotropicGaussian(base.mean + base.variance * self.eps * c, base.variance)
        if isinstance(base, GaussianMixture):
            shift = self.eps * np.outer(base.variances, c)
            logw = (np.log(base.weights) + self.eps * base.means @ c
                    + 0.5 * self.eps ** 2 * base.variances * float(c @ c))
            logw -= logw.max()
            w = np.exp(logw)
            return GaussianMixture(w / w.sum(), base.means + shift, base.variances)
        return None

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        resolved = self.resolve()
        if resolved is None:
            raise NumericalError(
                "tilted distribution is not closed-form samplable; "
                "use expectation() for importance-weighted estimates"
            )
        return resolved.sample(n, rng)

    def expectation(self, fn, n: int, rng: Rng, min_ess_fraction: float = 0.1):
        """Self-normalised importance estimate of E_q[fn(X)] from base draws.

        Returns (estimate, effective sample size).  Raises when the ESS falls
        below ``min_ess_fraction * n``.
        """
        pts = self.base.sample(n, rng)
        logw = self.eps * self.potential.value(pts)
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
        ess = 1.0 / float((w * w).sum())
        if ess < min_ess_fraction * n:
            raise NumericalError(
                f"effective sample size too low: {ess:.1f} of {n} "
                f"(need >= {min_ess_fraction * n:.1f})"
            )
        vals = np.asarray(fn(pts), dtype=np.float64)
        est = np.tensordot(w, vals, axes=(0, 0))
        return (float(est) if np.ndim(est) == 0 else est), ess

    def to_dict(self) -> dict:
        return {"kind": "tilted", "base": self.base.to_dict(),
                "potential": self.potential.to_dict(), "eps": self.eps}


class LearnedScore:
    """Score field given by a trained MLP x -> s(x)."""

    def __init__(self, net: Mlp, noise_std: float, metadata: dict | None = None):
        if net.out_dim != net.in_dim:
            raise ValueError("a score net must map R^d to R^d")
        self.net = net
        self.noise_std = float(noise_std)
        self.metadata = dict(metadata or {})

    @property
    def dim(self) -> int:
        return self.net.in_dim

    def score(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        return _maybe_row(self.net.apply(pts), single)

    def to_dict(self) -> dict:
        return {"kind": "learned-mlp", "dimension": self.dim,
                "noise_std": self.noise_std, "metadata": self.metadata,
                **self.net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnedScore":
        return cls(Mlp.from_dict(d), d["noise_std"], d.get("metadata"))


def score_model_from_dict(d: dict):
    """Rebuild any serialised score model."""
    kind = d.get("kind")
    if kind == "isotropic-gaussian":
        return IsotropicGaussian(d["mean"], d["variance"])
    if kind == "gaussian-mixture":
        return GaussianMixture(d["weights"], d["means"], d["variances"])
    if kind == "tilted":
        return TiltedScore(score_model_from_dict(d["base"]),
                           Potential(d["potential"]["kind"], d["potential"]["coeff"]),
                           d["eps"])
    if kind == "learned-mlp":
        return LearnedScore.from_dict(d)
    raise ConfigError(f"unknown score model kind {kind!r}")


def shift_score_field(p, q, x):
    """Local shift direction grad log(q/p)(x) = s_q(x) - s_p(x)."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch between p and q")
    return q.score(x) - p.score(x)


def log_density_up_to_constant(model, x):
    """Log density up to an additive constant; closed-form kinds only."""
    if isinstance(model, TiltedScore):
        return model.log_density_unnormalised(x)
    log_density = getattr(model, "log_density", None)
    if log_density is None:
        raise NumericalError("density unavailable")
    return log_density(x)


def fisher_divergence(p, approx, n: int, rng: Rng) -> tuple[float, float]:
    """Monte-Carlo estimate of E_p || s_approx(X) - s_p(X) ||^2.

    Returns (estimate, standard error); requires n >= 100.
    """
    if n < 100:
        raise ValueError("need at least 100 samples")
    pts = p.sample(n, rng)
    diff = np.atleast_2d(approx.score(pts)) - np.atleast_2d(p.score(pts))
    return mean_and_stderr((diff * diff).sum(axis=1))


def train_dsm_score(
    samples,
    noise_std: float,
    hidden=(64, 64),
    config: TrainConfig | None = None,
    activation: str = "tanh",
) -> tuple[LearnedScore, list[float]]:
    """Fit a score net by denoising score matching at one noise scale.

    The regression target for a perturbed point x + sigma z is -z / sigma.
    Returns the model and the per-epoch loss history.
    """
    if noise_std <= 0:
        raise ConfigError("noise std must be positive")
    pts = as_points(samples)
    if pts.shape[0] < 100:
        raise ValueError("need at least 100 training samples")
    if np.all(pts == pts[0]):
        warnings.warn("degenerate data: all training points identical", stacklevel=2)
    config = config or TrainConfig(epochs=200)
    config.validate()
    d = pts.shape[1]
    rng = Rng(config.seed)
    net = Mlp.glorot([d, *hidden, d], activation, rng.substream(0))
    params = net.weights + net.biases
    opt = make_optimizer(config.optimizer, config.learning_rate,
                         config.beta1, config.beta2, config.eps)
    shuffle_rng = rng.substream(1)
    noise_rng = rng.substream(2)
    n = pts.shape[0]
    history: list[float] = []
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            xb = pts[sel]
            m = len(sel)
            z = noise_rng.normal((m, d))
            out, pre, act = net.forward_cache(xb + noise_std * z)
            err = out + z / noise_std
            loss = float(np.mean((err * err).sum(axis=1)))
            gw, gb = net.param_gradients(pre, act, 2.0 * err / m)
            opt.step(params, gw + gb)
            epoch_loss += loss * m
        epoch_loss /= n
        if not math.isfinite(epoch_loss):
            raise NumericalError("training diverged")
        history.append(epoch_loss)
    meta = {"objective": "denoising-score-matching", "epochs": config.epochs,
            "final_loss": history[-1], "seed": config.seed}
    return LearnedScore(net, noise_std, meta), history
