"""Box-plot figures rendered from the metrics table of a simulation run."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

METHOD_ORDER = ("selection-informed", "split", "naive")
COLORS = {"selection-informed": "#4c72b0", "split": "#55a868", "naive": "#c44e52"}


def _grouped_boxplot(ax, metrics, column, title, hline=None):
    labels = list(dict.fromkeys(metrics["randomization"]))
    methods = [m for m in METHOD_ORDER if m in set(metrics["method"])]
    width = 0.8 / max(len(methods), 1)
    for mi, method in enumerate(methods):
        data, positions = [], []
        for li, lab in enumerate(labels):
            sub = metrics[(metrics["method"] == method)
                          & (metrics["randomization"] == lab)]
            vals = sub[column].dropna().to_numpy()
            if len(vals):
                data.append(vals)
                positions.append(li + (mi - (len(methods) - 1) / 2) * width)
        if not data:
            continue
        bp = ax.boxplot(data, positions=positions, widths=0.9 * width,
                        patch_artist=True, showfliers=False, manage_ticks=False)
        for box in bp["boxes"]:
            box.set_facecolor(COLORS.get(method, "#aaaaaa"))
            box.set_alpha(0.75)
        for med in bp["medians"]:
            med.set_color("black")
    if hline is not None:
        ax.axhline(hline, color="k", linestyle="--", linewidth=1)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("randomization level")
    ax.set_title(title)
    handles = [plt.Rectangle((0, 0), 1, 1, facecolor=COLORS.get(m, "#aaaaaa"), alpha=0.75)
               for m in methods]
    ax.legend(handles, methods, loc="best", fontsize=8)


def render_figures(metrics: pd.DataFrame, out_dir, level: float = 0.9) -> list:
    """Write F1, coverage, and interval-length box plots next to the CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ok = metrics[~metrics["failed"]]
    written = []
    panels = [
        ("f1", "selection accuracy (F1)", "selection_f1.png", None),
        ("coverage", "coverage of credible intervals", "coverage.png", level),
        ("median_length", "interval length (median per replication)",
         "interval_length.png", None),
    ]
    for column, title, fname, hline in panels:
        if ok[column].dropna().empty:
            continue
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        _grouped_boxplot(ax, ok, column, title, hline=hline)
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)
    return written
