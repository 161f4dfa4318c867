"""Figure rendering for the experiment report path.

Every renderer takes already-computed table rows and writes a PNG next to
the delimited output.  Rendering is deterministic: fixed figure geometry,
the Agg backend, and no timestamp or software metadata in the files.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"metadata": {"Software": None}, "dpi": 130}


def _save(fig, path):
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_rotation(rows_by_name: dict, path) -> None:
    """Functional, task error and log-likelihood against the shift angle."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 9), sharex=True)
    for name, rows in rows_by_name.items():
        phis = [r.phi for r in rows]
        taste = np.array([r.taste for r in rows])
        err = 3 * np.array([r.taste_stderr for r in rows])
        axes[0].errorbar(phis, taste, yerr=err, marker="o", capsize=3, label=name)
        axes[1].plot(phis, [r.mse for r in rows], marker="s", label=name)
        axes[2].errorbar(phis, [r.loglik for r in rows],
                         yerr=3 * np.array([r.loglik_stderr for r in rows]),
                         marker="^", capsize=3, label=name)
    axes[0].set_ylabel("adjusted functional")
    axes[0].axhline(0.0, color="gray", lw=0.8)
    axes[1].set_ylabel("task MSE")
    axes[2].set_ylabel("mean log-lik under train dist")
    axes[2].set_xlabel("shift angle phi")
    for ax in axes:
        ax.legend(loc="best", fontsize=8)
        ax.grid(alpha=0.3)
    fig.suptitle("Directional shift sweep")
    _save(fig, path)


def render_tilt(eps, estimates, stderrs, slope, path) -> None:
    """Functional against tilt strength with the predicted first-order line."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.errorbar(eps, estimates, yerr=3 * np.asarray(stderrs), marker="o",
                capsize=3, label="estimated functional")
    grid = np.linspace(0.0, max(eps), 50)
    ax.plot(grid, slope * grid, "--", label=f"predicted slope {slope:.4g}")
    ax.set_xlabel("tilt strength eps")
    ax.set_ylabel("functional")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.suptitle("Exponential tilt response")
    _save(fig, path)


def render_power(rows, path) -> None:
    """Power and false-positive rate against contamination level."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    corr = [r.corruption for r in rows]
    ax.plot(corr, [r.power for r in rows], marker="o", label="power")
    ax.plot(corr, [r.fpr for r in rows], marker="s", label="false positive rate")
    if rows:
        ax.axhline(rows[0].fpr, color="gray", lw=0.8, ls=":")
    ax.set_xlabel("contamination level")
    ax.set_ylabel("rate")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.suptitle("Calibrated test power")
    _save(fig, path)


def render_histograms(in_scores, out_scores, tau, path) -> None:
    """Score distributions for in- and out-points with the threshold."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    lo = min(np.min(in_scores), np.min(out_scores))
    hi = max(np.max(in_scores), np.max(out_scores))
    bins = np.linspace(lo, hi, 60)
    ax.hist(in_scores, bins=bins, alpha=0.6, density=True, label="in-distribution")
    ax.hist(out_scores, bins=bins, alpha=0.6, density=True, label="out-of-distribution")
    ax.axvline(tau, color="black", ls="--", label="threshold")
    ax.axvline(-tau, color="black", ls="--")
    ax.set_xlabel("adjusted residual")
    ax.set_ylabel("density")
    ax.legend()
    fig.suptitle("Per-sample residual distributions")
    _save(fig, path)


def render_blindspot(thetas, first_order, first_order_se, langevin, langevin_se,
                     closed_form, path) -> None:
    """Projected first-order functional against the full operator per angle."""
    fig, axes = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    axes[0].errorbar(thetas, first_order, yerr=3 * np.asarray(first_order_se),
                     marker="o", capsize=3, label="projected first-order")
    axes[0].plot(thetas, closed_form, "k--", lw=1, label="eps^2 cos(2 theta)")
    axes[0].axhline(0.0, color="gray", lw=0.8)
    axes[0].set_ylabel("first-order functional")
    axes[0].legend(fontsize=8)
    axes[1].errorbar(thetas, langevin, yerr=3 * np.asarray(langevin_se),
                     marker="s", capsize=3, color="tab:red", label="full operator")
    axes[1].axhline(0.0, color="gray", lw=0.8)
    axes[1].set_ylabel("functional")
    axes[1].set_xlabel("shift angle theta")
    axes[1].legend(fontsize=8)
    blind = [t for t in (math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4, 7 * math.pi / 4)
             if min(thetas) <= t <= max(thetas)]
    for ax in axes:
        for t in blind:
            ax.axvline(t, color="green", lw=0.6, ls=":")
        ax.grid(alpha=0.3)
    fig.suptitle("Directional blind spots of the projected operator")
    _save(fig, path)


def render_identity_battery(reports, path) -> None:
    """Discrepancy (in combined-stderr units) per identity check."""
    names = [r.name for r in reports]
    sigmas = [min(r.discrepancy_sigma, 10.0) for r in reports]
    fig, ax = plt.subplots(figsize=(8, 0.45 * len(names) + 2))
    ypos = np.arange(len(names))
    colors = ["tab:green" if r.within(3.0) else "tab:red" for r in reports]
    ax.barh(ypos, sigmas, color=colors)
    ax.axvline(3.0, color="black", ls="--", lw=1)
    ax.set_yticks(ypos)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("|lhs - rhs| in combined stderr units (capped at 10)")
    fig.suptitle("Identity battery")
    fig.tight_layout()
    _save(fig, path)


def render_loss_history(history, path, title="Training loss") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(1, len(history) + 1), history)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log" if min(history) > 0 else "linear")
    ax.grid(alpha=0.3)
    fig.suptitle(title)
    _save(fig, path)
