import logging
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from modules.evaluator import RETAINED_GROUP, TraceRow, smooth_trace  # noqa: E402

logger = logging.getLogger(__name__)

# text drawn as paths so the SVG needs no external fonts
plt.rcParams["svg.fonttype"] = "path"


def removal_phases(rows: Sequence[TraceRow]):
    """(group, first batch index at which the group's prompt is removed)"""
    phases = {}
    for row in sorted(rows, key=lambda r: r.batch_index):
        if row.removed and row.group not in phases:
            phases[row.group] = row.batch_index
    return sorted(phases.items(), key=lambda item: item[1])


def render_trace_svg(rows: Sequence[TraceRow], path: str, window: int = 5, num_classes: int = None):
    """Windowed accuracy per group over the stream, removal phases shaded"""
    smoothed = smooth_trace(rows, window)
    last_batch = max(r.batch_index for r in rows)
    fig, ax = plt.subplots(figsize=(8, 4))
    try:
        for group, values in smoothed.items():
            style = "-" if group == RETAINED_GROUP else "--"
            ax.plot(range(len(values)), values, style, label=group, linewidth=1.5)
        for group, start in removal_phases(rows):
            ax.axvspan(start - 0.5, last_batch + 0.5, color="violet", alpha=0.12, linewidth=0)
            ax.axvline(start - 0.5, color="violet", linewidth=0.8)
        if num_classes:
            ax.axhline(100.0 / num_classes, color="grey", linestyle=":", linewidth=1, label="chance")
        ax.set_xlabel("batch index")
        ax.set_ylabel(f"accuracy (%), window {window}")
        ax.set_ylim(-2, 102)
        ax.legend(loc="lower left", fontsize=8)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.savefig(path, format="svg", bbox_inches="tight")
        logger.info(f"Wrote trace chart {path}")
    finally:
        plt.close(fig)
