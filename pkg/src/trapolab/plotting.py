"""Deterministic SVG line plots.

Output is byte-stable across re-renders: fixed hash salt for element ids,
no creation date, text rendered as paths, and a fixed style.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "trapolab",
    "svg.fonttype": "path",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "axes.prop_cycle": matplotlib.cycler(color=["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]),
}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def line_plot(path, series: Sequence[tuple], *, title: str = "", xlabel: str = "step", ylabel: str = "",
              hlines: Sequence[tuple] = (), size=(6.4, 4.0)) -> None:
    """``series`` holds ``(label, xs, ys)``; ``None`` values in ``ys`` are
    skipped.  ``hlines`` holds ``(y, label)`` reference lines."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size)
        drawn = bool(hlines)
        for label, xs, ys in series:
            pts = [(x, y) for x, y in zip(xs, ys) if y is not None]
            if pts:
                x, y = zip(*pts)
                ax.plot(x, y, label=label)
                drawn = True
        for y, label in hlines:
            ax.axhline(y, linestyle="--", linewidth=0.8, color="0.4", label=label)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if drawn:
            ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        _save(fig, path)


def density_panels(path, grid: np.ndarray, expert: np.ndarray, panels: Sequence[tuple], void_mask=None,
                   size=(9.6, 2.6)) -> None:
    """One panel per ``(title, target_density)``, each overlaid on the
    expert density; the void region is shaded when given."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(panels)), figsize=size, sharey=True, squeeze=False)
        for ax, (title, dens) in zip(axes[0], panels):
            ax.plot(grid, expert, color="0.3", linestyle="--", label="expert")
            ax.plot(grid, dens, label="target")
            if void_mask is not None:
                top = max(float(expert.max()), float(np.max(dens)))
                ax.fill_between(grid, 0, top, where=void_mask, color="0.85", linewidth=0, label="void")
            ax.set_title(title)
        axes[0][0].legend(loc="upper left", fontsize=7)
        fig.tight_layout()
        _save(fig, path)
