"""Figure and delimited-text renderers for training runs and probes."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _class_names(names, r: int) -> list[str]:
    if names is None:
        return [str(i) for i in range(r)]
    names = [str(n) for n in names]
    if len(names) != r:
        raise ValueError(f"{r} classes but {len(names)} names")
    return names


def save_loss_curves(log, path) -> None:
    """Per-epoch loss terms on the left axis, validation accuracy on the right."""
    if not log:
        raise ValueError("empty training log")
    epochs = [e["epoch"] for e in log]
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    ax.plot(epochs, [e["total"] for e in log], color="tab:blue", label="total")
    ax.plot(epochs, [e["ce"] for e in log], color="tab:orange", linestyle="--", label="cross-entropy")
    ax.plot(epochs, [e["con"] for e in log], color="tab:green", linestyle=":", label="contrastive")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(epochs, [e["val_accuracy"] for e in log], color="tab:red", alpha=0.7, label="val accuracy")
    ax2.set_ylabel("validation accuracy")
    ax2.set_ylim(0.0, 1.05)
    handles1, labels1 = ax.get_legend_handles_labels()
    handles2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(handles1 + handles2, labels1 + labels2, loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion(confusion, path, class_names=None) -> None:
    """Heatmap of the confusion matrix with per-cell counts."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    r = cm.shape[0]
    names = _class_names(class_names, r)
    side = max(4.0, 0.55 * r + 2.0)
    fig, ax = plt.subplots(figsize=(side + 1.0, side))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(r), names, rotation=45, ha="right")
    ax.set_yticks(range(r), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    cutoff = cm.max() / 2 if cm.max() > 0 else 0.5
    for i in range(r):
        for j in range(r):
            ax.text(
                j,
                i,
                str(int(cm[i, j])),
                ha="center",
                va="center",
                fontsize=8,
                color="white" if cm[i, j] > cutoff else "black",
            )
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_probe_chart(report, path) -> None:
    """Paired bars of cross-domain correlation per class: phase vs Doppler."""
    rows = report.per_class
    if not rows:
        raise ValueError("probe report has no classes")
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.bar(x - 0.2, [r["phase_corr"] for r in rows], width=0.4, color="tab:orange", label="phase")
    ax.bar(x + 0.2, [r["dfs_corr"] for r in rows], width=0.4, color="tab:blue", label="doppler")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(x, [str(r["class_id"]) for r in rows])
    ax.set_xlabel("class")
    ax.set_ylabel("mean cross-domain correlation")
    ax.set_ylim(min(-0.1, ax.get_ylim()[0]), 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_confusion_csv(confusion, path, class_names=None) -> None:
    """Rows are true classes, columns predicted; headers carry class names."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    names = _class_names(class_names, cm.shape[0])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted"] + names)
        for name, row in zip(names, cm):
            writer.writerow([name] + [int(v) for v in row])


def write_probe_csv(report, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "phase_corr", "dfs_corr", "n_pairs"])
        for row in report.per_class:
            writer.writerow([row["class_id"], row["phase_corr"], row["dfs_corr"], row["n_pairs"]])
