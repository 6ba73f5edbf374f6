"""Figures rendered from run reports and comparison tables (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import BEYOND_HORIZON, best_iteration_cdf  # noqa: E402

# no timestamps or version strings, so identical inputs give identical files
_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def score_curves(curves: dict[str, list[list[float]]], path, xlabel="iteration"):
    """One line per label; with two or more runs a mean +/- std band."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, runs in sorted(curves.items()):
        n = min(len(r) for r in runs)
        arr = np.asarray([r[:n] for r in runs], dtype=np.float64)
        x = np.arange(1, n + 1)
        mean = arr.mean(0)
        ax.plot(x, mean, label=f"{label} (n={len(runs)})")
        if len(runs) > 1:
            std = arr.std(0, ddof=1)
            ax.fill_between(x, mean - std, mean + std, alpha=0.25)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean evaluation score")
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def best_iteration_plot(curves: list[list[float]], path):
    pts = best_iteration_cdf(curves)
    xs = [0] + [k for k, _ in pts]
    ys = [0.0] + [c for _, c in pts]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(xs, ys, where="post")
    ax.set_xlabel("iteration of first maximum score")
    ax.set_ylabel("fraction of runs")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def steps_to_match_bars(rows: list[dict], path, threshold: float):
    """Bars of steps-to-match per env, with the model-based budget as a red line."""
    labels, heights, hatched = [], [], []
    for r in rows:
        if r["metric"] != "steps_to_match":
            continue
        labels.append(r["env"])
        beyond = r["value"] == BEYOND_HORIZON
        heights.append(float("nan") if beyond else float(r["value"]))
        hatched.append(beyond)
    if not labels:
        raise ValueError("no steps_to_match rows to plot")
    top = np.nanmax(heights) if not all(np.isnan(heights)) else threshold
    fig, ax = plt.subplots(figsize=(max(4, len(labels)), 4))
    x = np.arange(len(labels))
    h = [top * 1.1 if b else v for v, b in zip(heights, hatched)]
    bars = ax.bar(x, h, color="tab:blue")
    for bar, b in zip(bars, hatched):
        if b:
            bar.set_hatch("//")
            bar.set_alpha(0.4)
    ax.axhline(threshold, color="red", lw=1.5)
    ax.set_xticks(x, labels)
    ax.set_ylabel("baseline interactions to match")
    return _save(fig, path)
