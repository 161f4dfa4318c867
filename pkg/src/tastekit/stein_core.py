"""Operator layer: score-weighted residuals of a fixed predictor.

The central quantity is the per-sample residual

    L f(x) = lap f(x) + s(x) . grad f(x),

which has mean zero when x is drawn from the distribution whose score is s.
Under an approximate score the systematic offset D_f = E_p[L f] is estimated
on a calibration set and subtracted, giving adjusted residuals
r(x) = L f(x) - D_f.  Four Laplacian routes are supported:

- ``exact``          column-by-column exact Hessian trace
- ``shortcut``       analytic softmax Hessian over a piecewise-affine backbone
- ``hutchinson:K``   mean of v^T H v over K Rademacher probes per sample
- ``omit``           drop the Laplacian term (opt-in, for affine-head regression)

Hutchinson probe noise is a pure function of (stream seed, sample key, probe
index), so results do not depend on batch boundaries or evaluation order.

The first-order field a(x) = grad f(x) + f(x) s(x) also has mean zero under
p componentwise; its fixed-direction projections admit whole families of
undetectable mean shifts, while its baseline-corrected squared norm does not
(at the price of no longer being mean-zero by construction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .numkit import Rng, as_points, as_vector, mean_and_stderr, rademacher_block, substream_seeds

_VALID_ROUTES = ("exact", "shortcut", "hutchinson", "omit")


@dataclass(frozen=True)
class LaplacianRoute:
    """How the Laplacian term is evaluated; ``probes`` only for hutchinson."""

    kind: str = "exact"
    probes: int = 0

    def __post_init__(self):
        if self.kind not in _VALID_ROUTES:
            raise ConfigError(f"unknown laplacian route {self.kind!r}")
        if self.kind == "hutchinson" and self.probes < 1:
            raise ConfigError("hutchinson route needs at least one probe")

    @classmethod
    def parse(cls, spec: "str | LaplacianRoute") -> "LaplacianRoute":
        """Parse route specs like ``exact``, ``shortcut``, ``hutchinson:16``."""
        if isinstance(spec, LaplacianRoute):
            return spec
        name, _, arg = spec.partition(":")
        if name == "hutchinson":
            try:
                return cls("hutchinson", int(arg or "0"))
            except ValueError as exc:
                raise ConfigError(f"bad probe count in route {spec!r}") from exc
        if arg:
            raise ConfigError(f"route {name!r} takes no argument")
        return cls(name)

    def label(self) -> str:
        return f"hutchinson:{self.probes}" if self.kind == "hutchinson" else self.kind


def hutchinson_laplacian(
    predictor,
    x,
    probes: int,
    rng: Rng,
    sample_keys=None,
    hvp_mode: str = "auto",
    fd_step_scale: float = 1e-4,
):
    """Stochastic trace estimate: mean of v^T H v over Rademacher probes v.

    Returns (estimates, per_probe) with shapes (n,) and (n, probes).
    Hessian-vector products use the predictor's exact tangent pass when
    available, otherwise central differences of the input gradient with step
    ``fd_step_scale * (1 + max_i |x_i|)`` per sample.  Probe draws for sample
    i come from substream ``sample_keys[i]`` (default: the batch position) of
    ``rng``'s seed, independent of batching.
    """
    if probes < 1:
        raise ConfigError("hutchinson route needs at least one probe")
    pts = as_points(x, predictor.dim)
    n, d = pts.shape
    keys = np.arange(n) if sample_keys is None else np.asarray(sample_keys)
    if keys.shape != (n,):
        raise ValueError("need one sample key per point")
    if hvp_mode == "auto":
        hvp_mode = "exact" if hasattr(predictor, "hvp") else "fd"
    if hvp_mode not in ("exact", "fd"):
        raise ConfigError(f"unknown hvp mode {hvp_mode!r}")
    seeds = substream_seeds(rng.seed, keys.astype(np.uint64))
    probe_block = rademacher_block(seeds, probes * d).reshape(n, probes, d)
    per_probe = np.empty((n, probes))
    for j in range(probes):
        v = probe_block[:, j, :]
        if hvp_mode == "exact":
            hv = predictor.hvp(pts, v)
        else:
            step = (fd_step_scale * (1.0 + np.abs(pts).max(axis=1)))[:, None]
            hv = (predictor.input_gradient(pts + step * v)
                  - predictor.input_gradient(pts - step * v)) / (2.0 * step)
        per_probe[:, j] = (v * hv).sum(axis=1)
    return per_probe.mean(axis=1), per_probe


def _laplacian_term(predictor, pts, route: LaplacianRoute, rng, sample_keys):
    if route.kind == "omit":
        return np.zeros(pts.shape[0])
    if route.kind == "exact":
        return np.asarray(predictor.input_laplacian_exact(pts))
    if route.kind == "shortcut":
        shortcut = getattr(predictor, "input_laplacian_softmax_shortcut", None)
        if shortcut is None:
            raise ConfigError("predictor does not support the softmax shortcut route")
        return np.asarray(shortcut(pts))
    if rng is None:
        raise ConfigError("hutchinson route requires an rng")
    est, _ = hutchinson_laplacian(predictor, pts, route.probes, rng, sample_keys)
    return est


def langevin_apply(predictor, score_model, x, route="exact", rng: Rng | None = None,
                   sample_keys=None):
    """Per-sample residuals lap f(x) + s(x) . grad f(x) along the given route.

    Route ``omit`` returns the dot-product term only; it is never applied
    implicitly.
    """
    route = LaplacianRoute.parse(route)
    single = np.asarray(x).ndim == 1
    if score_model.dim != predictor.dim:
        raise ValueError("dimension mismatch between predictor and score model")
    pts = as_points(x, predictor.dim)
    lap = _laplacian_term(predictor, pts, route, rng, sample_keys)
    dot = (np.atleast_2d(score_model.score(pts)) * predictor.input_gradient(pts)).sum(axis=1)
    vals = lap + dot
    return float(vals[0]) if single else vals


def per_dimension_residuals(predictor, score_model, x):
    """Coordinate residuals d2_ii f(x) + s_i(x) d_i f(x); rows sum to L f(x).

    Needs exact diagonal Hessian entries, so stochastic Laplacian routes do
    not apply here.
    """
    if not hasattr(predictor, "hessian_diagonal"):
        raise ConfigError("per-dimension residuals require an exact-Hessian predictor")
    single = np.asarray(x).ndim == 1
    pts = as_points(x, predictor.dim)
    vals = (predictor.hessian_diagonal(pts)
            + np.atleast_2d(score_model.score(pts)) * predictor.input_gradient(pts))
    return vals[0] if single else vals


@dataclass
class ResidualOptions:
    """Options for :func:`batch_adjusted_residuals`.

    ``batch_size`` is a streaming hint only; evaluation runs in fixed padded
    blocks so outputs never depend on it.
    """

    compute_baseline: bool = True
    route: LaplacianRoute | str = "exact"
    per_dimension: bool = False
    batch_size: int = 4096


@dataclass
class CalibrationBaseline:
    """Baseline offset D_f (and optional per-dimension vector and threshold).

    ``calibration_raw`` keeps the calibration residuals so a threshold can
    be calibrated afterwards; it is not serialised.
    """

    d_f: float
    d_f_stderr: float | None
    per_dimension: np.ndarray | None
    n_calibration: int
    threshold: float | None = None
    alpha: float | None = None
    mode: str | None = None
    calibration_raw: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "d_f": self.d_f,
            "d_f_stderr": self.d_f_stderr,
            "per_dimension": None if self.per_dimension is None else self.per_dimension.tolist(),
            "n_calibration": self.n_calibration,
            "threshold": self.threshold,
            "alpha": self.alpha,
            "mode": self.mode,
        }


@dataclass
class ResidualBatch:
    """Raw and baseline-adjusted residuals with provenance."""

    raw: np.ndarray
    baseline: float
    adjusted: np.ndarray
    route: str
    per_dimension_raw: np.ndarray | None = None
    per_dimension_adjusted: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "raw": self.raw.tolist(),
            "baseline": self.baseline,
            "adjusted": self.adjusted.tolist(),
            "route": self.route,
            "provenance": self.provenance,
        }
        if self.per_dimension_raw is not None:
            out["per_dimension_raw"] = self.per_dimension_raw.tolist()
            out["per_dimension_adjusted"] = self.per_dimension_adjusted.tolist()
        return out


# Residuals are evaluated in fixed-size blocks, the tail padded by repeating
# its last row (pad outputs discarded).  Every row then flows through gemm
# calls of identical shape, so results are bit-identical for any requested
# batch size; probe noise is already keyed per sample.
_EVAL_BLOCK = 512


def _chunked_stein_values(predictor, score_model, pts, route, rng, per_dimension, batch_size):
    n = pts.shape[0]
    raw = np.empty(n)
    per_dim = np.empty((n, predictor.dim)) if per_dimension else None
    for start in range(0, n, _EVAL_BLOCK):
        stop = min(start + _EVAL_BLOCK, n)
        chunk = pts[start:stop]
        keys = np.arange(start, stop)
        pad = _EVAL_BLOCK - (stop - start)
        if pad:
            chunk = np.concatenate([chunk, np.repeat(chunk[-1:], pad, axis=0)])
            keys = np.concatenate([keys, np.zeros(pad, dtype=keys.dtype)])
        vals = langevin_apply(predictor, score_model, chunk, route, rng, keys)
        raw[start:stop] = vals[: stop - start]
        if per_dimension:
            per_dim[start:stop] = per_dimension_residuals(
                predictor, score_model, chunk)[: stop - start]
    return raw, per_dim


def batch_adjusted_residuals(
    test_x,
    calibration_x,
    predictor,
    score_model,
    options: ResidualOptions | None = None,
    rng: Rng | None = None,
) -> tuple[ResidualBatch, CalibrationBaseline]:
    """Batched adjusted residuals over a test set.

    When ``compute_baseline`` is set, D_f is the mean raw residual over the
    calibration set (and a per-dimension baseline vector in per-dimension
    mode); otherwise D_f = 0.  Outputs are independent of ``batch_size``.
    """
    options = options or ResidualOptions()
    route = LaplacianRoute.parse(options.route)
    if options.per_dimension and route.kind != "exact":
        raise ConfigError("per-dimension residuals require the exact route")
    pts = as_points(test_x, predictor.dim)
    if pts.shape[0] == 0:
        raise ValueError("empty test set")
    cal_rng = rng.substream(1) if rng is not None else None
    test_rng = rng.substream(2) if rng is not None else None

    if options.compute_baseline:
        if calibration_x is None:
            raise ConfigError("baseline correction requires a calibration set")
        cal_pts = as_points(calibration_x, predictor.dim)
        cal_raw, cal_per_dim = _chunked_stein_values(
            predictor, score_model, cal_pts, route, cal_rng,
            options.per_dimension, options.batch_size)
        if cal_raw.size >= 2:
            d_f, d_f_stderr = mean_and_stderr(cal_raw)
        else:
            d_f, d_f_stderr = float(cal_raw.mean()), None
        per_dim_baseline = cal_per_dim.mean(axis=0) if options.per_dimension else None
        n_cal = cal_pts.shape[0]
    else:
        d_f, d_f_stderr, per_dim_baseline, n_cal = 0.0, None, None, 0

    raw, per_dim_raw = _chunked_stein_values(
        predictor, score_model, pts, route, test_rng,
        options.per_dimension, options.batch_size)
    adjusted = raw - d_f
    per_dim_adjusted = None
    if options.per_dimension:
        base_vec = per_dim_baseline if per_dim_baseline is not None else 0.0
        per_dim_adjusted = per_dim_raw - base_vec

    provenance = {
        "predictor_id": model_id(predictor),
        "score_model_id": model_id(score_model),
        "seed": None if rng is None else rng.seed,
        "n_test": pts.shape[0],
        "selected_class": getattr(predictor, "selected_class", None),
        "head": getattr(predictor, "head", "analytic"),
    }
    batch = ResidualBatch(raw=raw, baseline=d_f, adjusted=adjusted, route=route.label(),
                          per_dimension_raw=per_dim_raw,
                          per_dimension_adjusted=per_dim_adjusted,
                          provenance=provenance)
    baseline = CalibrationBaseline(d_f=d_f, d_f_stderr=d_f_stderr,
                                   per_dimension=per_dim_baseline, n_calibration=n_cal,
                                   calibration_raw=cal_raw if options.compute_baseline else None)
    return batch, baseline


def taste_functional_estimate(batch: ResidualBatch) -> tuple[float, float | None]:
    """Mean adjusted residual with standard error.

    A single-sample batch returns (residual, None): the spread is undefined.
    """
    if batch.adjusted.size == 0:
        raise ValueError("empty batch")
    if batch.adjusted.size == 1:
        return float(batch.adjusted[0]), None
    return mean_and_stderr(batch.adjusted)


def first_order_apply(predictor, score_model, x):
    """First-order field grad f(x) + f(x) s(x); mean zero under p."""
    single = np.asarray(x).ndim == 1
    pts = as_points(x, predictor.dim)
    vals = np.asarray(predictor.forward(pts))
    out = predictor.input_gradient(pts) + vals[:, None] * np.atleast_2d(score_model.score(pts))
    return out[0] if single else out


def first_order_projected(predictor, score_model, x, v):
    """Projection v . (grad f + f s); vanishing directions are blind spots."""
    direction = as_vector(v, predictor.dim)
    if not np.any(direction != 0.0):
        raise ValueError("projection direction must be non-zero")
    single = np.asarray(x).ndim == 1
    vals = np.atleast_2d(first_order_apply(predictor, score_model, x)) @ direction
    return float(vals[0]) if single else vals


@dataclass
class CorrectedL2Result:
    """Baseline-corrected squared norm of the first-order field."""

    value: float
    stderr: float
    test_mean: float
    test_stderr: float
    calibration_mean: float
    calibration_stderr: float

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "stderr": self.stderr,
            "test_mean": self.test_mean,
            "test_stderr": self.test_stderr,
            "calibration_mean": self.calibration_mean,
            "calibration_stderr": self.calibration_stderr,
        }


def first_order_l2_corrected(test_x, calibration_x, predictor, score_model) -> CorrectedL2Result:
    """Mean ||grad f + f s||^2 over test minus the same mean over calibration.

    Not itself mean-zero under p (the uncorrected norm is a variance), so the
    calibration mean is always subtracted.
    """
    test_sq = (first_order_apply(predictor, score_model, test_x) ** 2).sum(axis=1)
    cal_sq = (first_order_apply(predictor, score_model, calibration_x) ** 2).sum(axis=1)
    tm, ts = mean_and_stderr(test_sq)
    cm, cs = mean_and_stderr(cal_sq)
    return CorrectedL2Result(
        value=tm - cm,
        stderr=math.hypot(ts, cs),
        test_mean=tm, test_stderr=ts,
        calibration_mean=cm, calibration_stderr=cs,
    )


def model_id(model) -> str:
    """Short content hash identifying a predictor or score model."""
    import hashlib
    import json

    to_dict = getattr(model, "to_dict", None)
    if to_dict is None:
        payload = repr(model)
    else:
        payload = json.dumps(to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]
