"""Figure rendering for the analyze/prune/eval report paths.

All figures go to PNG files next to the JSON/CSV outputs; rendering uses
the Agg backend so runs are headless-safe.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_similarity_heatmap(S, path, title=None):
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(np.abs(S.matrix), vmin=0.0, vmax=1.0, cmap="viridis", interpolation="nearest")
    ax.set_xlabel("filter")
    ax.set_ylabel("filter")
    ax.set_title(title or f"|similarity| at {S.layer_id} ({S.sample_count} images)")
    fig.colorbar(im, ax=ax, label="|pearson|")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_stability_curves(report, path, max_pairs=64):
    """Per-pair similarity traces against sample count, plus the max
    deviation from the largest-sample estimate."""
    n = report.values.shape[1]
    iu = np.triu_indices(n, k=1)
    traces = report.values[:, iu[0], iu[1]]  # (counts, pairs)
    order = np.argsort(-np.abs(traces[-1]))[:max_pairs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for p in order:
        ax1.plot(report.sample_counts, traces[:, p], lw=0.8, alpha=0.6)
    ax1.set_xlabel("calibration images")
    ax1.set_ylabel("pair similarity")
    ax1.set_title(f"{report.layer_id}: similarity vs sample count")
    ax2.plot(report.sample_counts, report.deviations, marker="o")
    ax2.set_xlabel("calibration images")
    ax2.set_ylabel("max |S_k - S_max|")
    ax2.set_title("deviation from largest sample")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_histogram_comparison(before, after, edges, path, labels=("before", "after")):
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    centers = (edges[:-1] + edges[1:]) / 2
    width = (edges[1] - edges[0]) * 0.42
    ax.bar(centers - width / 2, before, width=width, label=labels[0], color="#2a6f97")
    ax.bar(centers + width / 2, after, width=width, label=labels[1], color="#c44536")
    ax.set_xlabel("|similarity|")
    ax.set_ylabel("feature pairs")
    ax.set_title("off-diagonal similarity before/after pruning")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_report_figure(report, path):
    """Per-tap reconstruction error and per-layer surrogate selection cost."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    if report.tap_errors:
        names = sorted(report.tap_errors)
        ax1.bar(range(len(names)), [report.tap_errors[n] for n in names], color="#2a6f97")
        ax1.set_xticks(range(len(names)))
        ax1.set_xticklabels(names, rotation=90, fontsize=6)
    ax1.axhline(report.logit_error, color="#c44536", lw=1.0,
                label=f"logit error {report.logit_error:.3g}")
    ax1.set_ylabel("relative L2 error")
    ax1.set_title(f"reconstruction error ({report.strategy})")
    ax1.legend(fontsize=8)
    if report.surrogate_costs:
        names = sorted(report.surrogate_costs)
        ax2.bar(range(len(names)), [report.surrogate_costs[n] for n in names], color="#6a994e")
        ax2.set_xticks(range(len(names)))
        ax2.set_xticklabels(names, rotation=90, fontsize=6)
    ax2.set_ylabel("sum(1 - |S|)")
    ax2.set_title("surrogate selection cost per layer")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
