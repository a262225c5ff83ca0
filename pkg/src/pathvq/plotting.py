"""SVG line charts for run metrics.

Charts are rendered deterministically (fixed hash salt, no embedded
timestamps) so same-seed runs produce identical files.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

matplotlib.rcParams["svg.hashsalt"] = "pathvq"


def line_chart(series: dict, path, title: str = "", xlabel: str = "epoch", ylabel: str = "") -> None:
    """series maps a label to a list of y values (x is the index) or to
    an (xs, ys) pair."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, data in series.items():
        if isinstance(data, tuple) and len(data) == 2:
            xs, ys = data
        else:
            xs, ys = range(len(data)), data
        ax.plot(list(xs), list(ys), label=label, linewidth=1.5)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(loc="best", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_csv(path, rows: list) -> None:
    """Write dict rows; columns follow first-row order plus extras sorted."""
    if not rows:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("")
        return
    cols = list(rows[0])
    extra = sorted({k for row in rows for k in row} - set(cols))
    cols += extra
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, restval="")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
