"""Report figures, rendered off-screen to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (4.5, 3.2)
# fixed metadata keeps repeated renders byte-identical
PNG_METADATA = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)


def pr_curve_figure(recall, precision, ap: float, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.step([0.0, *recall], [precision[0], *precision], where="pre", color="C0")
    ax.set_xlim(0.0, 1.02)
    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"change detection, AP = {ap:.3f}")
    _save(fig, path)


def dt_sweep_figure(thresholds, mious, method_miou: float, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(thresholds, mious, "o-", color="C1", ms=3, label="difference threshold")
    ax.axhline(method_miou, color="C0", ls="--", label="CRF")
    ax.set_xlabel("threshold on colour difference")
    ax.set_ylabel("pooled mIOU")
    ax.set_ylim(0.0, 1.02)
    ax.legend(loc="lower right", frameon=False)
    _save(fig, path)


def tau_sweep_figure(taus, mious, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(taus, mious, "o-", color="C0", ms=4)
    ax.set_xlabel("fixed foreground proportion tau")
    ax.set_ylabel("pooled mIOU")
    ax.set_ylim(0.0, 1.02)
    _save(fig, path)
