"""Report figures: filter-study RMSE bars and optimisation loss traces.

Figures are drawn with the Agg backend through the object API, so nothing
touches pyplot's global state and repeated runs write identical files.
"""

from __future__ import annotations

import math

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
_PNG_META = {"Software": None}


def _figure(width: float = 6.0, height: float | None = None) -> Figure:
    fig = Figure(figsize=(width, height or width * GOLDEN), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _tidy(ax) -> None:
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)


def filter_study_figure(rows, path) -> None:
    """Horizontal bars of RMSE per filter configuration, in the given order.

    ``rows`` is a list of ``(label, MetricReport)``; the unfiltered entry
    (label "none") is drawn in grey as the baseline.
    """
    if not rows:
        raise ValueError("no rows to plot")
    labels = [name for name, _ in rows]
    rmse = np.array([rep.rmse for _, rep in rows])
    fig = _figure(6.0, 0.9 + 0.45 * len(rows))
    ax = fig.add_subplot(1, 1, 1)
    colors = ["0.6" if name == "none" else "C0" for name in labels]
    pos = np.arange(len(rows))[::-1]
    ax.barh(pos, rmse, color=colors, height=0.6)
    for y, val in zip(pos, rmse):
        ax.text(val, y, f" {val:.3f}", va="center", fontsize=8)
    ax.set_yticks(pos)
    ax.set_yticklabels(labels)
    ax.set_xlabel("RMSE (m)")
    ax.set_xlim(0, rmse.max() * 1.18 if rmse.max() > 0 else 1.0)
    _tidy(ax)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)


def loss_trace_figure(trace, path, smooth: int = 10) -> None:
    """Total loss per step on a log axis, with a moving average of ``smooth`` steps."""
    totals = np.array([b.total for b in trace], dtype=np.float64)
    if totals.size == 0:
        raise ValueError("empty trace")
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    steps = np.arange(totals.size)
    positive = np.all(totals > 0)
    ax.plot(steps, totals, color="C0", lw=0.8, alpha=0.5, label="total")
    if totals.size >= smooth > 1:
        avg = np.convolve(totals, np.ones(smooth) / smooth, mode="valid")
        ax.plot(steps[smooth - 1 :], avg, color="C1", lw=1.5, label=f"mean of {smooth}")
    if positive:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    _tidy(ax)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
