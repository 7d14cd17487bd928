"""PNG figures for training curves, domain projections, m sweeps and cost tables.

Figures are drawn on bare :class:`~matplotlib.figure.Figure` objects with the
Agg canvas, so nothing here touches pyplot's global state or needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

DPI = 120
_METADATA = {"Software": None}  # keep the files free of version strings


def _figure(ncols, width=4.2, height=3.4):
    fig = Figure(figsize=(width * ncols, height), dpi=DPI)
    FigureCanvasAgg(fig)
    axes = [fig.add_subplot(1, ncols, i + 1) for i in range(ncols)]
    for ax in axes:
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    return fig, axes


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_METADATA)
    return path


def plot_history(history, path, title=None):
    """Loss terms and validation AUC per epoch; the restored epoch is marked."""
    epochs = [e.epoch for e in history.epochs]
    fig, (ax_loss, ax_auc) = _figure(2)
    ax_loss.plot(epochs, [e.l_d for e in history.epochs], "o-", label="L_d")
    ax_loss.plot(epochs, [e.l_task for e in history.epochs], "s-", label="L_task")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean training loss")
    ax_loss.legend(frameon=False)
    ax_auc.plot(epochs, history.val_aucs, "o-", color="C2")
    if history.best_epoch is not None:
        best = history.epochs[history.best_epoch - 1]
        ax_auc.axvline(best.epoch, color="0.6", ls="--", lw=1)
        ax_auc.annotate(f"best {best.val_auc:.4f}", (best.epoch, best.val_auc), textcoords="offset points", xytext=(4, -12))
    ax_auc.set_xlabel("epoch")
    ax_auc.set_ylabel("validation AUC")
    for ax in (ax_loss, ax_auc):
        ax.set_xticks(epochs)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def _scatter(ax, coords, labels, title):
    labels = np.asarray(labels)
    for j, value in enumerate(np.unique(labels)):
        sel = labels == value
        ax.scatter(coords[sel, 0], coords[sel, 1], s=4, alpha=0.6, color=f"C{j % 10}", label=str(value), rasterized=True)
    ax.set_title(title)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    if len(np.unique(labels)) <= 16:
        ax.legend(markerscale=3, fontsize=7, frameon=False, ncol=2)


def plot_projection(export, path):
    """PCA scatter coloured by mined domain, plus truth domains when known."""
    stage = "before encoder (z)" if export.stage == "pre_encoder" else "after encoder (z_e)"
    panels = 1 if export.truth is None else 2
    fig, axes = _figure(panels, width=4.6, height=4.0)
    _scatter(axes[0], export.coords, export.k, f"mined domain, {stage}")
    if export.truth is not None:
        _scatter(axes[1], export.coords, export.truth, f"true domain, {stage}")
    return _save(fig, path)


def plot_sweep(rows, path):
    """Validation AUC and NMI against codebook size; the best-AUC row is highlighted."""
    ms = [r["m"] for r in rows]
    fig, axes = _figure(2 if any(r.get("nmi") is not None for r in rows) else 1)
    axes[0].plot(ms, [r["val_auc"] for r in rows], "o-")
    for r in rows:
        if r.get("best"):
            axes[0].plot([r["m"]], [r["val_auc"]], "*", ms=14, color="C3")
    axes[0].set_xlabel("codebook size m")
    axes[0].set_ylabel("validation AUC")
    if len(axes) > 1:
        pts = [(r["m"], r["nmi"]) for r in rows if r.get("nmi") is not None]
        axes[1].plot(*zip(*pts), "o-", color="C1")
        axes[1].set_xlabel("codebook size m")
        axes[1].set_ylabel("NMI vs true domains")
    for ax in axes:
        ax.set_xticks(ms)
    return _save(fig, path)


def plot_costs(reports, path):
    """Side-by-side FLOPs and parameter bars for the profiled models."""
    names = [r.model for r in reports]
    x = np.arange(len(names))
    fig, (ax_f, ax_p) = _figure(2)
    ax_f.bar(x, [r.flops for r in reports], color="C0")
    ax_f.set_ylabel(f"FLOPs at batch {reports[0].batch_size}")
    ax_p.bar(x, [r.params for r in reports], color="C1")
    ax_p.set_ylabel("learnable parameters")
    for ax in (ax_f, ax_p):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=15)
    return _save(fig, path)
