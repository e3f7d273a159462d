"""Matplotlib rendering for the report paths.

Every analyze/theory/train stage writes its delimited tables first; these
helpers render the same data to PNG files next to them. All functions return
the path they wrote.
"""
from __future__ import annotations

import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt          # noqa: E402  (backend must be set first)
import numpy as np                       # noqa: E402

log = logging.getLogger(__name__)

_GROUP_TITLES = {"high": "predicted high", "low": "predicted low"}


def save_loss_trace(trace, path, title="training loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(trace) + 1), trace, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_attention_histogram(summary, group, path):
    """Paired histogram of per-record attention on the two explanation slots."""
    rows = summary.histogram_rows(group)
    lo = np.array([r[0] for r in rows])
    width = rows[0][1] - rows[0][0]
    pos = [r[2] for r in rows]
    neg = [r[3] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(lo, pos, width=width * 0.45, align="edge",
           label="positive explanation", color="tab:blue", alpha=0.8)
    ax.bar(lo + width * 0.45, neg, width=width * 0.45, align="edge",
           label="negative explanation", color="tab:orange", alpha=0.8)
    ax.set_xlabel("mean attention received")
    ax.set_ylabel("records")
    ax.set_title(f"attention on explanations ({_GROUP_TITLES.get(group, group)})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_attention_pie(summary, path):
    shares = summary.shares
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.pie(shares, labels=summary.slot_names, autopct="%.1f%%",
           startangle=90, counterclock=False)
    ax.set_title("share of input attention per slot")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _plot_rate_rows(rows, x_field, path, title, xlabel):
    by_method = {}
    for row in rows:
        by_method.setdefault(row["method"], []).append(row)
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for method, entries in sorted(by_method.items()):
        entries = sorted(entries, key=lambda r: r[x_field])
        xs = [r[x_field] for r in entries]
        ys = [r["mean_err"] for r in entries]
        style = "--" if method.endswith("_rate") else "-o"
        ax.plot(xs, ys, style, label=method, markersize=4)
        sds = [r["sd"] for r in entries]
        if any(sds):
            ax.fill_between(xs, [y - s for y, s in zip(ys, sds)],
                            [y + s for y, s in zip(ys, sds)], alpha=0.15)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("estimation error")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_rate_curves(rows, path):
    """Error curves from a convergence table: x is whichever of n/p varies."""
    ns = {r["n"] for r in rows}
    if len(ns) > 1:
        return _plot_rate_rows(rows, "n", path,
                               "estimation error vs sample size", "n")
    return _plot_rate_rows(rows, "p", path,
                           "estimation error vs ambient dimension", "p")


def save_metric_bars(reports, path, metric="auc"):
    """Bar chart comparing one metric across variant reports."""
    labels = [r.label or f"model {i}" for i, r in enumerate(reports)]
    values = [getattr(r, metric) for r in reports]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.bar(labels, values, color="tab:green", alpha=0.85)
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} by variant")
    for tick in ax.get_xticklabels():
        tick.set_rotation(20)
        tick.set_ha("right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
