"""Report figures: ROC curves, the scaling log-log plot and training loss.

Each function writes one PNG and returns its path. The Agg backend is
selected so the CLI works without a display.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 4.0),
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    # fixed metadata keeps PNG bytes stable between runs
    "savefig.dpi": 110,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_roc(curves: Mapping[str, Sequence], path, fpr_mark: float | None = 0.2, log_x: bool = False) -> Path:
    """``curves`` maps a legend label to a list of RocPoint."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, roc in curves.items():
            ax.step([p.fpr for p in roc], [p.tpr for p in roc], where="post", label=label)
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--", label="chance")
        if fpr_mark is not None:
            ax.axvline(fpr_mark, color="0.4", lw=0.6, ls=":")
        if log_x:
            ax.set_xscale("symlog", linthresh=1e-3)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_scaling(rows, slopes: Mapping[str, float], path) -> Path:
    """Comparison counts versus flow count on log-log axes, one line per matcher."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for m in sorted({r.matcher for r in rows}):
            pts = sorted((r.n, r.comparisons) for r in rows if r.matcher == m)
            ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o",
                      label=f"{m} (slope {slopes.get(m, float('nan')):.2f})")
        ax.set_xlabel("flows per side (N = M)")
        ax.set_ylabel("similarity comparisons")
        ax.legend(loc="upper left")
        return _save(fig, path)


def plot_loss(loss_history: Sequence[float], path, target: float | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(range(1, len(loss_history) + 1), loss_history, marker=".")
        if target is not None:
            ax.axhline(target, color="0.4", lw=0.6, ls=":", label=f"target {target:g}")
            ax.legend(loc="upper right")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean triplet loss")
        return _save(fig, path)
