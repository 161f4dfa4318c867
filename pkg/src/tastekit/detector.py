"""Calibrated thresholding of residual scores and ranking metrics.

The decision rule is the quantile test: estimate tau as the empirical
(1 - alpha)-quantile of calibration scores under the training distribution
and flag a test point when its score strictly exceeds tau.  Three score
modes map a signed residual r onto the tested statistic: ``absolute`` |r|,
``signed-upper`` r, ``signed-lower`` -r.  Larger transformed scores always
mean "more out-of-distribution".

AUROC uses the Mann-Whitney convention (ties count half); FPR@95%TPR picks
the threshold as the empirical 5%-quantile of the out-scores, so at least
95% of them exceed it, and reports the fraction of in-scores above it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import Rng, empirical_quantile
from .shift_lab import mixture_build

MODES = ("absolute", "signed-upper", "signed-lower")


def transform_scores(scores, mode: str):
    """Map signed residuals to the tested statistic for the given mode."""
    if mode not in MODES:
        raise ValueError(f"unknown detector mode {mode!r}")
    a = np.asarray(scores, dtype=np.float64)
    if mode == "absolute":
        return np.abs(a)
    if mode == "signed-upper":
        return a
    return -a


def calibrate(residuals, alpha: float, mode: str = "absolute") -> float:
    """Threshold tau: empirical (1 - alpha)-quantile of calibration scores."""
    a = np.asarray(residuals, dtype=np.float64).ravel()
    if a.size < 20:
        raise ValueError("too few calibration residuals (need >= 20)")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return empirical_quantile(transform_scores(a, mode), 1.0 - alpha)


def decide(score, tau: float, mode: str = "absolute"):
    """Flag out-of-distribution when the transformed score strictly exceeds tau."""
    vals = transform_scores(score, mode)
    flags = vals > tau
    return bool(flags) if np.ndim(flags) == 0 else flags


def auroc(in_scores, out_scores) -> float:
    """P(out > in) with half credit for ties (Mann-Whitney)."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(out_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score lists must be non-empty")
    combined = np.concatenate([a, b])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_out = float(ranks[a.size:].sum())
    u = rank_sum_out - b.size * (b.size + 1) / 2.0
    return u / (a.size * b.size)


def fpr_at_95_tpr(in_scores, out_scores) -> float:
    """False-positive rate at the threshold passed by >= 95% of out-scores."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(out_scores, dtype=np.float64).ravel()
    if b.size < 20:
        raise ValueError("too few out-scores (need >= 20)")
    if a.size == 0:
        raise ValueError("in-scores must be non-empty")
    threshold = empirical_quantile(b, 0.05)
    return float(np.mean(a > threshold))


@dataclass
class DetectionReport:
    """Scores, decisions and summary metrics for one labelled evaluation."""

    scores: np.ndarray
    labels: np.ndarray
    alpha: float
    tau: float
    mode: str
    decisions: np.ndarray
    fpr: float
    tpr: float | None
    auroc: float | None
    fpr95: float | None
    power_table: list | None = None
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    @classmethod
    def evaluate(cls, scores, labels, alpha: float, tau: float, mode: str = "absolute",
                 seed: int | None = None, provenance: dict | None = None,
                 power_table: list | None = None) -> "DetectionReport":
        scores = np.asarray(scores, dtype=np.float64).ravel()
        labels = np.asarray(labels, dtype=bool).ravel()
        if scores.shape != labels.shape:
            raise ValueError("scores and labels must align")
        transformed = transform_scores(scores, mode)
        decisions = transformed > tau
        n_in = int((~labels).sum())
        n_out = int(labels.sum())
        fpr = float(decisions[~labels].mean()) if n_in else float("nan")
        tpr = float(decisions[labels].mean()) if n_out else None
        roc = auroc(transformed[~labels], transformed[labels]) if n_in and n_out else None
        f95 = (fpr_at_95_tpr(transformed[~labels], transformed[labels])
               if n_in and n_out >= 20 else None)
        return cls(scores=scores, labels=labels, alpha=alpha, tau=tau, mode=mode,
                   decisions=decisions, fpr=fpr, tpr=tpr, auroc=roc, fpr95=f95,
                   power_table=power_table, seed=seed, provenance=provenance or {})

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "tau": self.tau,
            "mode": self.mode,
            "fpr": self.fpr,
            "tpr": self.tpr,
            "auroc": self.auroc,
            "fpr95": self.fpr95,
            "n_in": int((~self.labels).sum()),
            "n_out": int(self.labels.sum()),
            "scores": self.scores.tolist(),
            "labels": self.labels.astype(int).tolist(),
            "decisions": self.decisions.astype(int).tolist(),
            "power_table": self.power_table,
            "seed": self.seed,
            "provenance": self.provenance,
        }


@dataclass
class DetectionPipeline:
    """Calibrated residual scorer: maps points to flags via a fixed tau."""

    residual_fn: object
    tau: float
    alpha: float
    mode: str = "absolute"
    provenance: dict = field(default_factory=dict)

    def scores(self, x) -> np.ndarray:
        return np.asarray(self.residual_fn(x), dtype=np.float64)

    def flags(self, x) -> np.ndarray:
        return decide(self.scores(x), self.tau, self.mode)


def make_pipeline(predictor, score_model, calibration_x, alpha: float,
                  mode: str = "absolute", route="exact", rng: Rng | None = None,
                  provenance: dict | None = None,
                  use_baseline: bool = True) -> DetectionPipeline:
    """Build a calibrated pipeline from a calibration set.

    The baseline offset D_f and the threshold tau both come from the same
    calibration residuals; ``use_baseline=False`` keeps D_f = 0.
    """
    from .stein_core import LaplacianRoute, langevin_apply

    parsed = LaplacianRoute.parse(route)
    cal_rng = rng.substream(1) if rng is not None else None
    cal = np.asarray(calibration_x, dtype=np.float64)
    cal_raw = langevin_apply(predictor, score_model, cal, parsed, cal_rng,
                             np.arange(len(cal)))
    d_f = float(np.mean(cal_raw)) if use_baseline else 0.0
    tau = calibrate(cal_raw - d_f, alpha, mode)
    eval_rng = rng.substream(2) if rng is not None else None

    def residual_fn(x):
        pts = np.asarray(x, dtype=np.float64)
        return langevin_apply(predictor, score_model, pts, parsed, eval_rng,
                              np.arange(len(pts))) - d_f

    return DetectionPipeline(residual_fn=residual_fn, tau=tau, alpha=alpha, mode=mode,
                             provenance={"d_f": d_f, "n_calibration": len(cal),
                                         "route": parsed.label(), **(provenance or {})})


@dataclass
class PowerRow:
    """One corruption level of a power curve; power is NaN without out-points."""

    corruption: float
    power: float
    fpr: float
    n: int
    mean_abs_score: float

    def to_dict(self) -> dict:
        return {"corruption": self.corruption, "power": self.power, "fpr": self.fpr,
                "n": self.n, "mean_abs_score": self.mean_abs_score}


def power_curve(in_dist, out_dist, corruption_grid, n_per_point: int,
                pipeline: DetectionPipeline, rng: Rng) -> list[PowerRow]:
    """Rejection rates of the calibrated test across contamination levels.

    ``power`` is the flag rate among true out-points, ``fpr`` among true
    in-points; the mean |score| is kept as a task-degradation proxy.
    """
    rows = []
    for i, level in enumerate(corruption_grid):
        pts, labels = mixture_build(in_dist, out_dist, float(level), n_per_point,
                                    rng.substream(i))
        flags = pipeline.flags(pts)
        n_out = int(labels.sum())
        n_in = n_per_point - n_out
        power = float(flags[labels].mean()) if n_out else float("nan")
        fpr = float(flags[~labels].mean()) if n_in else float("nan")
        rows.append(PowerRow(corruption=float(level), power=power, fpr=fpr,
                             n=n_per_point,
                             mean_abs_score=float(np.abs(pipeline.scores(pts)).mean())))
    return rows
