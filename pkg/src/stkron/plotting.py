"""Figures written next to the delimited report output."""
from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .anomaly import DecisionPolicy, RocCurve  # noqa: E402


def plot_score_trace(rows: Sequence, path, policy: Optional[DecisionPolicy] = None,
                     labels: Optional[np.ndarray] = None) -> None:
    """Aggregate clip score against clip centre frame, with the normal band shaded."""
    agg = [r for r in rows if r.block == -1]
    centers = np.array([(r.start_frame + r.end_frame) / 2 for r in agg])
    scores = np.array([r.score for r in agg])
    fig, ax = plt.subplots(figsize=(7, 3.2))
    if labels is not None and len(labels):
        bad = np.flatnonzero(np.asarray(labels) > 0)
        if bad.size:
            ax.axvspan(bad[0], bad[-1] + 1, color="tab:red", alpha=0.12, label="labelled anomalous")
    if policy is not None and np.isfinite(policy.low_threshold):
        ax.axhspan(policy.high_threshold, policy.low_threshold, color="tab:green", alpha=0.15,
                   label="normal band")
    ax.plot(centers, scores, "-o", ms=3, color="tab:blue", label="clip score")
    ax.set_xlabel("frame")
    ax.set_ylabel("Mahalanobis score")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_roc(curve: RocCurve, path, label: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(curve.fpr, curve.tpr, "-", color="tab:blue",
            label=f"{label} AUC={curve.auc:.3f}".strip())
    ax.plot([0, 1], [0, 1], ":", color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_block_flags(flags: np.ndarray, path, scores: Optional[np.ndarray] = None) -> None:
    """Block grid heat map of scores with flagged blocks outlined."""
    flags = np.asarray(flags, dtype=bool)
    fig, ax = plt.subplots(figsize=(4, 4))
    img = np.asarray(scores, dtype=float).reshape(flags.shape) if scores is not None else flags.astype(float)
    ax.imshow(img, cmap="viridis")
    for r, c in zip(*np.nonzero(flags)):
        ax.add_patch(plt.Rectangle((c - 0.5, r - 0.5), 1, 1, fill=False, ec="red", lw=2))
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
