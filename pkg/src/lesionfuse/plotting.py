"""Figure rendering for evaluation reports and training histories.

Kept apart from the metric code: nothing here is imported unless figures
are requested, and every function writes a PNG and returns its path.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def plot_confusion(report: EvalReport, path) -> Path:
    counts = np.asarray(report.confusion, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.imshow(norm, cmap="Blues", vmin=0.0, vmax=1.0)
    names = report.class_names
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, int(counts[i, j]), ha="center", va="center",
                    color="white" if norm[i, j] > 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, label="row fraction")
    ax.set_title(f"ACC {report.acc:.3f}  BACC {report.bacc:.3f}")
    fig.tight_layout()
    return _save(fig, path)


def plot_roc(report: EvalReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, points in report.roc.items():
        pts = np.array([[p[0], p[1]] for p in points])
        auc = report.auc_per_class.get(name)
        label = name if auc is None else f"{name} (AUC {auc:.3f})"
        ax.plot(pts[:, 0], pts[:, 1], drawstyle="steps-post", label=label)
    ax.plot([0, 1], [0, 1], color="grey", linestyle=":", linewidth=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if report.roc:
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(history: Sequence[dict], path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("loss_final", "loss_wce", "loss_sr"):
        left.plot(epochs, [h[key] for h in history], label=key)
    left.set_xlabel("epoch")
    left.set_ylabel("loss")
    left.set_yscale("log")
    left.legend()
    for key in ("val_bacc", "val_acc"):
        right.plot(epochs, [h[key] for h in history], label=key)
    right.set_xlabel("epoch")
    right.set_ylim(0, 1)
    right.legend()
    fig.tight_layout()
    return _save(fig, path)


def render_report(report: EvalReport, out_dir, history: List[dict] = None) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"confusion": plot_confusion(report, out_dir / "confusion.png"),
             "roc": plot_roc(report, out_dir / "roc.png")}
    if history:
        paths["history"] = plot_history(history, out_dir / "history.png")
    return paths


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
