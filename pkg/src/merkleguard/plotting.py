"""Figures for the attack study. Rendered headless (Agg) straight to files."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

if TYPE_CHECKING:
    from .experiment import StudyResult

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_accuracy_by_sink_class(result: "StudyResult", path: str | Path) -> Path:
    """Bars of trojaned accuracy per sink class against the clean baseline."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        classes = [r.sink_class for r in result.rows]
        acc = [r.trojaned_accuracy for r in result.rows]
        colors = ["tab:red" if not r.localized else "tab:blue" for r in result.rows]
        ax.bar(classes, acc, color=colors, width=0.7, label="trojaned")
        ax.axhline(result.baseline_accuracy, color="black", lw=1, ls="--", label="baseline")
        ax.set_xticks(classes)
        ax.set_xlabel("sink class")
        ax.set_ylabel("test accuracy")
        lo = min(acc + [result.baseline_accuracy])
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        ax.legend(loc="upper center", ncol=2, bbox_to_anchor=(0.5, 1.12))
        return _save(fig, Path(path))


def plot_drop_vs_class_share(result: "StudyResult", path: str | Path) -> Path:
    """Measured accuracy drop against the share of the sink class in the test set."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        share = [r.class_fraction for r in result.rows]
        drop = [r.accuracy_drop for r in result.rows]
        ax.scatter(share, drop, s=18, color="tab:blue", zorder=3)
        for r in result.rows:
            ax.annotate(str(r.sink_class), (r.class_fraction, r.accuracy_drop),
                        textcoords="offset points", xytext=(3, 3), fontsize=7)
        lo, hi = min(share + drop), max(share + drop)
        pad = 0.005
        ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="grey", lw=0.8, ls=":")
        ax.set_xlabel("class share of test set")
        ax.set_ylabel("accuracy drop")
        return _save(fig, Path(path))
