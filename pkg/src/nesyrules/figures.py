"""Figure rendering: loss curves, strategy comparisons, overlay grids.

Everything draws through the Agg backend and writes straight to files;
nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import AggregateReport
from .labelling import ActivationOverlay
from .training import TrainLog


def _prepare(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def plot_train_log(log: TrainLog, path: str | Path) -> Path:
    """Per-epoch loss curves with phase-transition markers."""
    path = _prepare(path)
    epochs = [r["epoch"] for r in log.records]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for key, label in (
        ("ce_loss", "cross-entropy"),
        ("sparsity_loss", "sparsity"),
        ("total", "total"),
        ("val_total", "validation total"),
    ):
        ax.plot(epochs, [r[key] for r in log.records], label=label, linewidth=1.2)
    for event in log.events:
        if event.get("what") == "compute_P" and event.get("epoch", 0) > 0:
            ax.axvline(event["epoch"], color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(f"{log.header.get('strategy', '?')} training (seed {log.header.get('seed')})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_strategy_comparison(reports: list[AggregateReport], path: str | Path) -> Path:
    """Bar chart of rule-set accuracy and size per strategy."""
    path = _prepare(path)
    usable = [r for r in reports if r.rounded_means() is not None]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    if usable:
        names = [r.strategy for r in usable]
        acc = [r.rounded_means()["nesy_accuracy"] for r in usable]
        size = [r.rounded_means()["ruleset_size"] for r in usable]
        x = np.arange(len(names))
        ax.bar(x - 0.2, acc, width=0.4, label="accuracy (%)", color="tab:blue")
        ax2 = ax.twinx()
        ax2.bar(x + 0.2, size, width=0.4, label="rule-set size", color="tab:red")
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        ax.set_ylabel("accuracy (%)", color="tab:blue")
        ax2.set_ylabel("rule-set size", color="tab:red")
        handles1, labels1 = ax.get_legend_handles_labels()
        handles2, labels2 = ax2.get_legend_handles_labels()
        ax.legend(handles1 + handles2, labels1 + labels2, fontsize=8, loc="upper right")
    else:
        ax.text(0.5, 0.5, "no completed runs", ha="center", va="center")
    ax.set_title("strategy comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_overlay_grid(
    overlays_per_filter: dict[int, list[ActivationOverlay]], path: str | Path
) -> Path:
    """One row per filter, one column per top image; heat overlays."""
    path = _prepare(path)
    n_rows = max(len(overlays_per_filter), 1)
    n_cols = max((len(v) for v in overlays_per_filter.values()), default=1)
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(2.2 * n_cols, 2.4 * n_rows), squeeze=False
    )
    for row, (filter_id, overlays) in enumerate(sorted(overlays_per_filter.items())):
        for col in range(n_cols):
            ax = axes[row][col]
            ax.axis("off")
            if col < len(overlays):
                ov = overlays[col]
                ax.imshow(ov.overlay)
                ax.set_title(f"f{filter_id} {ov.image_id}", fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
