"""File-based plots of training logs and embedding projections."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("recon", "kl", "tc", "disc", "cls_t", "cls_p", "adv_t", "adv_p", "total")
FAIRNESS_KEYS = ("val_accuracy", "val_equalized_accuracy", "val_equal_opportunity", "val_equalized_odds")


def loss_series(records) -> dict:
    """Per-step loss components of the representation phase, keyed by name."""
    out = {}
    for key in LOSS_KEYS:
        pts = [(r["step"], r[key]) for r in records if r.get("phase") == "repr" and key in r]
        if pts:
            out[key] = pts
    return out


def metric_series(records) -> dict:
    out = {}
    for key in ("task", "adversary", *FAIRNESS_KEYS):
        pts = [(r["epoch"], r[key]) for r in records if r.get("phase") == "downstream" and key in r]
        if pts:
            out[key] = pts
    return out


def plot_series(series: dict, path, title: str, xlabel: str, log_scale_keys=()) -> dict:
    """Line plot, one panel per series; returns the plotted data."""
    path = Path(path)
    n = max(len(series), 1)
    cols = min(3, n)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 2.8 * rows), squeeze=False)
    for ax, (key, pts) in zip(axes.flat, series.items()):
        xs, ys = zip(*pts)
        ax.plot(xs, ys, lw=1)
        ax.set_title(key, fontsize=9)
        ax.set_xlabel(xlabel, fontsize=8)
        if key in log_scale_keys and min(ys) > 0:
            ax.set_yscale("log")
    for ax in list(axes.flat)[len(series):]:
        ax.axis("off")
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=90)
    plt.close(fig)
    return series


def plot_projection(projection_csv, path, title: str = "subspace projection") -> dict:
    """Scatter of 2-D projection coordinates colored by subspace."""
    with open(projection_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    groups = {}
    for r in rows:
        groups.setdefault(r["subspace"], []).append((float(r["pc1"]), float(r["pc2"])))
    colors = {"TAL": "tab:blue", "PAL": "tab:green", "MAL": "tab:orange"}
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, pts in groups.items():
        xs, ys = zip(*pts)
        ax.scatter(xs, ys, s=3, alpha=0.5, label=name, c=colors.get(name))
    ax.legend(markerscale=4)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=90)
    plt.close(fig)
    return groups
