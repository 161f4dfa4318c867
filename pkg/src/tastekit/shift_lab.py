"""Parameterised shift families and numerical checks of the core identities.

Each check estimates both sides of an identity by Monte Carlo and reports
them with standard errors; the discrepancy is expressed in combined-stderr
units so a caller can apply an n-sigma rule.  The identities covered:

- projection:      E_q[L f] = -E_q[grad f . grad log(q/p)]
- tilt slope:      d/d eps E_{q_eps}[L f] at 0  =  Cov_p(L f, h)
- tilt variance:   Var_{q_eps}[L f] = Var_p[L f] + eps Cov_p((L f)^2, h) + O(eps^2)
- decomposition:   E_q[L~ f] = E_p[L~ f] + E_q[L f] + E_p[g (l - 1)]
                   with g = (s~ - s_p) . grad f and l = q / p
- Fisher bound:    |E_p[g (l-1)]| <= sqrt(E_p||s~ - s_p||^2)
                                     * (E_p||grad f||^4)^(1/4)
                                     * (E_p|l-1|^4)^(1/4)

Sweeps over rotation families use common random numbers across grid points:
every angle shares the same base normal draws, which removes most of the
Monte-Carlo wobble from cross-angle comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .numkit import Rng, as_points, as_vector, covariance, mean_and_stderr
from .score_models import (
    GaussianMixture,
    IsotropicGaussian,
    Potential,
    TiltedScore,
    shift_score_field,
)
from .stein_core import langevin_apply


@dataclass
class IdentityCheckReport:
    """Two-sided Monte-Carlo comparison of an identity."""

    name: str
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    n: int
    seed: int
    extras: dict = field(default_factory=dict)

    @property
    def combined_stderr(self) -> float:
        return math.hypot(self.lhs_stderr, self.rhs_stderr)

    @property
    def discrepancy_sigma(self) -> float:
        gap = abs(self.lhs - self.rhs)
        denom = self.combined_stderr
        if denom == 0.0:
            return 0.0 if gap == 0.0 else math.inf
        return gap / denom

    def within(self, n_sigma: float = 3.0) -> bool:
        return self.discrepancy_sigma <= n_sigma

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "lhs_stderr": self.lhs_stderr,
            "rhs": self.rhs,
            "rhs_stderr": self.rhs_stderr,
            "discrepancy_sigma": self.discrepancy_sigma,
            "n": self.n,
            "seed": self.seed,
            "extras": self.extras,
        }


def rotation_matrix(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def rotation_family(eps: float, phi: float, base_direction=None) -> IsotropicGaussian:
    """Unit-variance 2-d Gaussian with mean eps * R_phi u, ||u|| = 1."""
    u = np.array([1.0, 1.0]) / math.sqrt(2.0) if base_direction is None else as_vector(base_direction, 2)
    norm = float(np.linalg.norm(u))
    if norm == 0.0:
        raise ValueError("base direction must be non-zero")
    u = u / norm
    return IsotropicGaussian(eps * (rotation_matrix(phi) @ u), 1.0)


def mean_shift_family(base, mu):
    """Shift a Gaussian or mixture by a constant vector."""
    mu = as_vector(mu, base.dim)
    if isinstance(base, IsotropicGaussian):
        return IsotropicGaussian(base.mean + mu, base.variance)
    if isinstance(base, GaussianMixture):
        return GaussianMixture(base.weights, base.means + mu, base.variances)
    raise ValueError("mean shift supported for Gaussian families only")


class MixtureDistribution:
    """Two-component contamination model: (1 - beta) * in + beta * out."""

    def __init__(self, in_dist, out_dist, out_fraction: float):
        if not 0.0 <= out_fraction <= 1.0:
            raise ValueError("out fraction must lie in [0, 1]")
        if in_dist.dim != out_dist.dim:
            raise ValueError("dimension mismatch between mixture components")
        self.in_dist = in_dist
        self.out_dist = out_dist
        self.out_fraction = float(out_fraction)

    @property
    def dim(self) -> int:
        return self.in_dist.dim

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        return mixture_build(self.in_dist, self.out_dist, self.out_fraction, n, rng)[0]

    def _component_logs(self, pts):
        li = np.atleast_1d(self.in_dist.log_density(pts))
        lo = np.atleast_1d(self.out_dist.log_density(pts))
        return li, lo

    def log_density(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        if self.out_fraction == 0.0:
            vals = np.atleast_1d(self.in_dist.log_density(pts))
        elif self.out_fraction == 1.0:
            vals = np.atleast_1d(self.out_dist.log_density(pts))
        else:
            li, lo = self._component_logs(pts)
            a = np.log1p(-self.out_fraction) + li
            b = math.log(self.out_fraction) + lo
            m = np.maximum(a, b)
            vals = m + np.log(np.exp(a - m) + np.exp(b - m))
        return float(vals[0]) if single else vals

    def score(self, x):
        single = np.asarray(x).ndim == 1
        pts = as_points(x, self.dim)
        if self.out_fraction in (0.0, 1.0):
            src = self.out_dist if self.out_fraction == 1.0 else self.in_dist
            out = np.atleast_2d(src.score(pts))
        else:
            li, lo = self._component_logs(pts)
            a = np.log1p(-self.out_fraction) + li
            b = math.log(self.out_fraction) + lo
            m = np.maximum(a, b)
            wi = np.exp(a - m)
            wo = np.exp(b - m)
            tot = wi + wo
            out = ((wi / tot)[:, None] * np.atleast_2d(self.in_dist.score(pts))
                   + (wo / tot)[:, None] * np.atleast_2d(self.out_dist.score(pts)))
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {"kind": "mixture", "out_fraction": self.out_fraction,
                "in": self.in_dist.to_dict(), "out": self.out_dist.to_dict()}


def mixture_build(in_dist, out_dist, out_fraction: float, n: int, rng: Rng):
    """n labelled samples with exactly round(out_fraction * n) out-points.

    Returns (points, labels) with labels True for out-of-distribution
    members; the order is a seeded shuffle.
    """
    if not 0.0 <= out_fraction <= 1.0:
        raise ValueError("out fraction must lie in [0, 1]")
    n_out = int(round(out_fraction * n))
    n_in = n - n_out
    parts, labels = [], []
    if n_in:
        parts.append(in_dist.sample(n_in, rng))
        labels.append(np.zeros(n_in, dtype=bool))
    if n_out:
        parts.append(out_dist.sample(n_out, rng))
        labels.append(np.ones(n_out, dtype=bool))
    pts = np.concatenate(parts) if parts else np.empty((0, in_dist.dim))
    lab = np.concatenate(labels) if labels else np.empty(0, dtype=bool)
    order = rng.permutation(n)
    return pts[order], lab[order]


def projection_identity_check(predictor, p, q, n: int, rng: Rng,
                              name: str = "projection-identity") -> IdentityCheckReport:
    """E_q[L_p f] against -E_q[grad f . u] on the same q-draws."""
    seed = rng.seed
    pts = q.sample(n, rng)
    lhs, lhs_se = mean_and_stderr(langevin_apply(predictor, p, pts))
    u = np.atleast_2d(shift_score_field(p, q, pts))
    rhs_vals = -(predictor.input_gradient(pts) * u).sum(axis=1)
    rhs, rhs_se = mean_and_stderr(rhs_vals)
    return IdentityCheckReport(name, lhs, lhs_se, rhs, rhs_se, n, seed)


@dataclass
class SweepRow:
    """One rotation-sweep grid point; fields match the CSV header."""

    phi: float
    taste: float
    taste_stderr: float
    mse: float
    loglik: float
    loglik_stderr: float

    def to_dict(self) -> dict:
        return {"phi": self.phi, "taste": self.taste, "taste_stderr": self.taste_stderr,
                "mse": self.mse, "loglik": self.loglik, "loglik_stderr": self.loglik_stderr}


def rotation_sweep(
    predictor,
    phis,
    rng: Rng,
    eps: float = 10.0,
    base_direction=None,
    n_per_angle: int = 1000,
    n_calibration: int = 20000,
    p: IsotropicGaussian | None = None,
    score_model=None,
    task=None,
    route="exact",
    baseline: bool = True,
) -> list[SweepRow]:
    """Baseline-corrected functional, task error and log-likelihood per angle.

    The test distribution at angle phi is N(eps * R_phi u, I).  All angles
    share one set of base draws (common random numbers).  ``task`` maps
    points to regression targets; default y = x2 - x1.
    """
    p = p or IsotropicGaussian.standard(2)
    score_model = score_model or p
    task = task or (lambda pts: pts[:, 1] - pts[:, 0])
    if baseline:
        cal = p.sample(n_calibration, rng.substream(0))
        d_f = float(np.mean(langevin_apply(predictor, score_model, cal, route,
                                           rng.substream(1))))
    else:
        d_f = 0.0
    base = rng.substream(2).normal((n_per_angle, 2))
    rows = []
    for i, phi in enumerate(phis):
        mean = rotation_family(eps, phi, base_direction).mean
        pts = mean + base
        resid = langevin_apply(predictor, score_model, pts, route, rng.substream(3 + i)) - d_f
        taste, taste_se = mean_and_stderr(resid)
        preds = np.asarray(predictor.forward(pts))
        mse = float(np.mean((preds - task(pts)) ** 2))
        loglik, loglik_se = mean_and_stderr(p.log_density(pts))
        rows.append(SweepRow(float(phi), taste, taste_se, mse, loglik, loglik_se))
    return rows


def _tilt_mean(tilt: TiltedScore, fn, n: int, rng: Rng, min_ess_fraction: float = 0.1):
    """Mean and stderr of fn under a tilt, by SNIS from the base."""
    pts = tilt.base.sample(n, rng)
    logw = tilt.eps * tilt.potential.value(pts)
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    ess = 1.0 / float((w * w).sum())
    if ess < min_ess_fraction * n:
        raise NumericalError(
            f"effective sample size too low: {ess:.1f} of {n}")
    vals = np.asarray(fn(pts), dtype=np.float64)
    est = float(w @ vals)
    se = math.sqrt(float((w * w) @ ((vals - est) ** 2)))
    return est, se, ess


def tilt_slope_check(predictor, p, potential: Potential, eps_grid, n: int, rng: Rng,
                     name: str = "tilt-slope") -> IdentityCheckReport:
    """First-order response of E_{q_eps}[L_p f] against Cov_p(L_p f, h).

    The finite-difference slope is taken between eps = 0 and the smallest
    positive grid value.  Linear tilts of Gaussian families use the exact
    shifted sampler with coupled draws; other tilts fall back to SNIS.
    """
    seed = rng.seed
    eps_grid = sorted(float(e) for e in eps_grid)
    if not eps_grid or eps_grid[0] <= 0.0:
        raise ValueError("eps grid must contain positive values")

    pts_p = p.sample(n, rng.substream(0))
    g_vals = langevin_apply(predictor, p, pts_p)
    h_vals = np.atleast_1d(potential.value(pts_p))
    predicted = covariance(g_vals, h_vals)
    zc = (g_vals - g_vals.mean()) * (h_vals - h_vals.mean())
    predicted_se = float(np.std(zc, ddof=1) / math.sqrt(n))

    coupled = (potential.kind == "linear" and isinstance(p, IsotropicGaussian))
    estimates = {}
    if coupled:
        base = p.sample(n, rng.substream(1))
        vals0 = langevin_apply(predictor, p, base)
        shift_dir = p.variance * potential.coeff
        diffs = None
        for eps in eps_grid:
            vals = langevin_apply(predictor, p, base + eps * shift_dir)
            estimates[eps] = mean_and_stderr(vals)
            if eps == eps_grid[0]:
                diffs = (vals - vals0) / eps
        slope, slope_se = mean_and_stderr(diffs)
    else:
        s0, s0_se, _ = _tilt_mean(TiltedScore(p, potential, 0.0),
                                  lambda x: langevin_apply(predictor, p, x),
                                  n, rng.substream(1))
        for i, eps in enumerate(eps_grid):
            tilt = TiltedScore(p, potential, eps)
            est, se, ess = _tilt_mean(tilt, lambda x: langevin_apply(predictor, p, x),
                                      n, rng.substream(1))
            estimates[eps] = (est, se)
        e0 = eps_grid[0]
        slope = (estimates[e0][0] - s0) / e0
        slope_se = math.hypot(estimates[e0][1], s0_se) / e0

    extras = {"eps_grid": eps_grid,
              "estimates": {str(e): list(estimates[e]) for e in eps_grid},
              "coupled_draws": coupled}
    return IdentityCheckReport(name, slope, slope_se, predicted, predicted_se, n, seed,
                               extras=extras)


def tilt_variance_check(predictor, p, potential: Potential, eps: float, n: int, rng: Rng,
                        name: str = "tilt-variance") -> IdentityCheckReport:
    """Var_{q_eps}[L_p f] against Var_p[L_p f] + eps Cov_p((L_p f)^2, h).

    The remainder is O(eps^2), so the check is meaningful for small eps.
    """
    seed = rng.seed
    pts_p = p.sample(n, rng.substream(0))
    g_vals = langevin_apply(predictor, p, pts_p)
    h_vals = np.atleast_1d(potential.value(pts_p))
    var_p = float(np.var(g_vals, ddof=1))
    var_p_se = _variance_stderr(g_vals)
    cov2 = covariance(g_vals ** 2, h_vals)
    zc = (g_vals ** 2 - np.mean(g_vals ** 2)) * (h_vals - h_vals.mean())
    cov2_se = float(np.std(zc, ddof=1) / math.sqrt(n))
    rhs = var_p + eps * cov2
    rhs_se = math.hypot(var_p_se, eps * cov2_se)

    tilt = TiltedScore(p, potential, eps)
    resolved = tilt.resolve()
    if resolved is not None:
        pts_q = resolved.sample(n, rng.substream(1))
        q_vals = langevin_apply(predictor, p, pts_q)
        lhs = float(np.var(q_vals, ddof=1))
        lhs_se = _variance_stderr(q_vals)
    else:
        mean_q, _, _ = _tilt_mean(tilt, lambda x: langevin_apply(predictor, p, x),
                                  n, rng.substream(1))
        lhs, lhs_se, _ = _tilt_mean(
            tilt, lambda x: (langevin_apply(predictor, p, x) - mean_q) ** 2,
            n, rng.substream(1))
    return IdentityCheckReport(name, lhs, lhs_se, rhs, rhs_se, n, seed,
                               extras={"eps": eps, "var_p": var_p, "cov_sq_h": cov2})


def _variance_stderr(vals: np.ndarray) -> float:
    n = vals.size
    c = vals - vals.mean()
    m2 = float(np.mean(c ** 2))
    m4 = float(np.mean(c ** 4))
    return math.sqrt(max(m4 - m2 * m2, 0.0) / n)


def _normalised_log_density(model):
    if isinstance(model, TiltedScore):
        resolved = model.resolve()
        if resolved is None:
            raise NumericalError("density ratio unavailable for unresolved tilts")
        return resolved.log_density
    fn = getattr(model, "log_density", None)
    if fn is None:
        raise NumericalError("density ratio unavailable")
    return fn


def density_ratio(p, q, x):
    """l(x) = q(x) / p(x) from normalised closed-form densities."""
    return np.exp(np.atleast_1d(_normalised_log_density(q)(x))
                  - np.atleast_1d(_normalised_log_density(p)(x)))


def directional_decomposition_check(predictor, p, q, biased_score, n: int, rng: Rng,
                                    name: str = "directional-decomposition") -> IdentityCheckReport:
    """Four-term split of E_q under an approximate score.

    Each term is estimated from its own independent sample set, so the
    combined stderr of the comparison is exact.
    """
    seed = rng.seed
    ratio_fn = lambda pts: density_ratio(p, q, pts)  # validates availability

    lhs, lhs_se = mean_and_stderr(
        langevin_apply(predictor, biased_score, q.sample(n, rng.substream(0))))
    t1, t1_se = mean_and_stderr(
        langevin_apply(predictor, biased_score, p.sample(n, rng.substream(1))))
    t2, t2_se = mean_and_stderr(
        langevin_apply(predictor, p, q.sample(n, rng.substream(2))))
    pts = p.sample(n, rng.substream(3))
    g_vals = ((np.atleast_2d(biased_score.score(pts)) - np.atleast_2d(p.score(pts)))
              * predictor.input_gradient(pts)).sum(axis=1)
    t3, t3_se = mean_and_stderr(g_vals * (ratio_fn(pts) - 1.0))

    rhs = t1 + t2 + t3
    rhs_se = math.sqrt(t1_se ** 2 + t2_se ** 2 + t3_se ** 2)
    extras = {"shifted_mean": [lhs, lhs_se], "baseline_term": [t1, t1_se],
              "exact_score_term": [t2, t2_se], "score_error_term": [t3, t3_se]}
    return IdentityCheckReport(name, lhs, lhs_se, rhs, rhs_se, n, seed, extras=extras)


def fisher_bound_check(predictor, p, q, biased_score, n: int, rng: Rng,
                       name: str = "fisher-bound") -> IdentityCheckReport:
    """Score-error term against its Cauchy-Schwarz/Hoelder upper bound.

    lhs = |E_p[g (l-1)]|; rhs = sqrt(J) * ||grad f||_{L4(p)} * ||l-1||_{L4(p)}
    with every factor Monte-Carlo estimated.  ``extras['bound_holds']`` is
    the 3-sigma verdict lhs <= rhs + 3 * combined stderr.
    """
    seed = rng.seed
    pts = p.sample(n, rng.substream(0))
    err = np.atleast_2d(biased_score.score(pts)) - np.atleast_2d(p.score(pts))
    grads = predictor.input_gradient(pts)
    g_vals = (err * grads).sum(axis=1)
    lvals = density_ratio(p, q, pts)

    inner, inner_se = mean_and_stderr(g_vals * (lvals - 1.0))
    lhs, lhs_se = abs(inner), inner_se

    pts_j = p.sample(n, rng.substream(1))
    err_j = np.atleast_2d(biased_score.score(pts_j)) - np.atleast_2d(p.score(pts_j))
    j_est, j_se = mean_and_stderr((err_j * err_j).sum(axis=1))
    a4, a4_se = mean_and_stderr((grads * grads).sum(axis=1) ** 2)
    b4, b4_se = mean_and_stderr((lvals - 1.0) ** 4)

    if j_est <= 0.0 or a4 <= 0.0 or b4 <= 0.0:
        rhs, rhs_se = 0.0, 0.0
    else:
        rhs = math.sqrt(j_est) * a4 ** 0.25 * b4 ** 0.25
        rel = math.sqrt((j_se / (2 * j_est)) ** 2 + (a4_se / (4 * a4)) ** 2
                        + (b4_se / (4 * b4)) ** 2)
        rhs_se = rhs * rel
    bound_holds = lhs <= rhs + 3.0 * math.hypot(lhs_se, rhs_se)
    extras = {"fisher_divergence": [j_est, j_se], "grad_l4": a4, "ratio_l4": b4,
              "bound_holds": bool(bound_holds)}
    return IdentityCheckReport(name, lhs, lhs_se, rhs, rhs_se, n, seed, extras=extras)
