#!/usr/bin/env python3
"""Palette and matplotlib line charts for loss curves and IoU sweeps."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import matplotlib
from matplotlib.figure import Figure

logger = logging.getLogger(__name__)

# Palette
PLOT_BLUE = "#5C6BC0"
PLOT_GREEN = "#66BB6A"
PLOT_ORANGE = "#FFB74D"
PLOT_RED = "#EF5350"
PLOT_PURPLE = "#AB47BC"
PLOT_TEAL = "#26A69A"
PLOT_BROWN = "#8D6E63"
PLOT_GRAY = "#E0E0E0"
PLOT_DARK_GRAY = "#555555"

SERIES_COLORS = (PLOT_BLUE, PLOT_GREEN, PLOT_ORANGE, PLOT_RED, PLOT_PURPLE, PLOT_TEAL, PLOT_BROWN)

Series = Dict[str, Tuple[Sequence[float], Sequence[float]]]


def build_line_chart(series: Series, title: str = "", x_label: str = "", y_label: str = "") -> Figure:
    """One line with point markers per series, legend outside the axes."""
    if not any(len(xs) for xs, _ in series.values()):
        raise ValueError("nothing to plot")
    fig = Figure(figsize=(8, 5))
    ax = fig.add_subplot(1, 1, 1)
    for index, (name, (xs, ys)) in enumerate(series.items()):
        ax.plot(xs, ys, "-o", markersize=3, linewidth=1.5, label=name,
                color=SERIES_COLORS[index % len(SERIES_COLORS)])
    ax.set_title(title, color=PLOT_DARK_GRAY)
    ax.set_xlabel(x_label, color=PLOT_DARK_GRAY)
    ax.set_ylabel(y_label, color=PLOT_DARK_GRAY)
    ax.grid(True, color=PLOT_GRAY)
    ax.legend(loc="upper left", bbox_to_anchor=(1.02, 1.0), frameon=False)
    fig.tight_layout()
    return fig


def read_csv_columns(path: Union[str, Path]) -> Dict[str, List[float]]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    try:
        return {key: [float(row[key]) for row in rows] for key in rows[0]}
    except (TypeError, ValueError) as e:
        raise ValueError(f"{path}: non-numeric value: {e}") from None


def plot_csv(path: Union[str, Path]) -> Figure:
    """Chart for a losses.csv (every loss against iter) or a sweep.csv (map against threshold)."""
    columns = read_csv_columns(path)
    if "threshold" in columns:
        return build_line_chart({"mAP": (columns["threshold"], columns["map"])},
                                "mAP vs IoU threshold", "IoU threshold", "mAP")
    if "iter" in columns:
        series = {name: (columns["iter"], values) for name, values in columns.items()
                  if name not in ("iter", "lr")}
        return build_line_chart(series, "Training losses", "iteration", "loss")
    raise ValueError(f"{path} is neither a losses.csv nor a sweep.csv")


# Undated output and fixed SVG ids keep renders byte-identical
SAVE_METADATA = {".svg": {"Date": None}, ".pdf": {"CreationDate": None}}
SVG_HASH_SALT = "maf-detector"


def write_plot(csv_path: Union[str, Path], out_path: Union[str, Path]) -> Path:
    """Render csv_path; the output format follows the suffix (.svg, .png, .pdf)."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig = plot_csv(csv_path)
    with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
        fig.savefig(out_path, metadata=SAVE_METADATA.get(out_path.suffix.lower()))
    logger.info(f"Plot written to {out_path}")
    return out_path
