"""Figure rendering from emitted result tables.

The delimited results file is the data contract; everything here reads that
file (or an already-parsed row list) and writes PNG files next to it. No
figure is required to reproduce the numbers: they exist for eyeballing runs.
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")  # headless; never require a display
import matplotlib.pyplot as plt
import numpy as np

from .experiments import CSV_HEADER

__all__ = [
    "read_results",
    "coverage_figure",
    "set_size_figure",
    "class_coverage_figure",
    "gcspd_margin_figure",
    "render_report",
]

_METHOD_STYLE = {
    "WCC_CSPD_Oracle": dict(color="#1a6faf", marker="o"),
    "WCC_CSPD_Estimated": dict(color="#56a8e0", marker="s"),
    "WCP_Oracle": dict(color="#c24f00", marker="^"),
    "WCP_Estimated": dict(color="#ef9c4e", marker="v"),
    "CP": dict(color="#5f5f5f", marker="d"),
}


def read_results(csv_path: str) -> list[dict]:
    """Parse an emitted results table into typed row dicts."""
    try:
        with open(csv_path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            expected = CSV_HEADER.split(",")
            if fields != expected:
                raise ValueError(
                    f"{csv_path}: expected header {expected}, got {fields}"
                )
            rows = []
            for raw in reader:
                rows.append(
                    {
                        "trial": int(raw["trial"]),
                        "method": raw["method"],
                        "r": float(raw["r"]),
                        "class": raw["class"],
                        "coverage": float(raw["coverage"]),
                        "avg_set_size": float(raw["avg_set_size"]),
                        "empty_rate": float(raw["empty_rate"]),
                        "seed": int(raw["seed"]),
                    }
                )
    except OSError as exc:
        raise OSError(f"cannot read {csv_path}: {exc.strerror or exc}") from exc
    if not rows:
        raise ValueError(f"{csv_path} has no data rows")
    return rows


def _grouped(rows, metric, class_filter):
    """(method -> r -> (mean, se)) over trials, nan rows dropped."""
    cells = defaultdict(list)
    for row in rows:
        if row["class"] != class_filter or math.isnan(row[metric]):
            continue
        cells[(row["method"], row["r"])].append(row[metric])
    out = defaultdict(dict)
    for (method, r), values in cells.items():
        arr = np.asarray(values, dtype=float)
        se = 0.0 if arr.size < 2 else float(arr.std(ddof=1) / math.sqrt(arr.size))
        out[method][r] = (float(arr.mean()), se)
    return out


def _style(method):
    return _METHOD_STYLE.get(method, dict(marker="o"))


def _plot_metric(ax, grouped, ylabel):
    for method, by_r in grouped.items():
        rs = sorted(by_r)
        means = [by_r[r][0] for r in rs]
        errs = [by_r[r][1] for r in rs]
        ax.errorbar(rs, means, yerr=errs, label=method, capsize=3, **_style(method))
    ax.set_xlabel("drift power r")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)


def coverage_figure(rows, out_path: str, alpha: float = 0.1) -> str:
    """Marginal coverage versus r, one line per method, nominal level dashed."""
    grouped = _grouped(rows, "coverage", "marginal")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    _plot_metric(ax, grouped, "marginal coverage")
    ax.axhline(1.0 - alpha, color="black", linestyle="--", linewidth=1.0)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def set_size_figure(rows, out_path: str) -> str:
    """Average prediction-set size versus r, one line per method."""
    grouped = _grouped(rows, "avg_set_size", "marginal")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    _plot_metric(ax, grouped, "average set size")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def class_coverage_figure(rows, out_path: str, alpha: float = 0.1) -> str:
    """Per-class coverage versus r, one panel per class."""
    classes = sorted(
        {row["class"] for row in rows if row["class"] != "marginal"}, key=int
    )
    if not classes:
        raise ValueError("no per-class rows to plot")
    fig, axes = plt.subplots(
        1, len(classes), figsize=(3.2 * len(classes), 3.4), sharey=True
    )
    axes = np.atleast_1d(axes)
    for ax, cls in zip(axes, classes):
        _plot_metric(ax, _grouped(rows, "coverage", cls), f"class {cls} coverage")
        ax.axhline(1.0 - alpha, color="black", linestyle="--", linewidth=1.0)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def gcspd_margin_figure(alphas, margins, out_path: str) -> str:
    """Ordering-check clearance over the alpha grid; below zero is a failure."""
    alphas = np.asarray(alphas, dtype=float)
    margins = np.asarray(margins, dtype=float)
    if alphas.shape != margins.shape or alphas.size == 0:
        raise ValueError("need one margin per alpha")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(alphas, margins, marker="o", color="#1a6faf")
    ax.axhline(0.0, color="black", linestyle="--", linewidth=1.0)
    ax.set_xlabel("alpha")
    ax.set_ylabel("ordering margin")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_report(csv_path: str, out_dir: str | None = None, alpha: float = 0.1):
    """Render the standard figures next to a results table.

    Returns the list of written file paths. out_dir defaults to the table's
    directory, so figures land alongside the delimited output.
    """
    rows = read_results(csv_path)
    if out_dir is None:
        out_dir = os.path.dirname(os.path.abspath(csv_path))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(csv_path))[0]
    written = [
        coverage_figure(rows, os.path.join(out_dir, f"{stem}_coverage.png"), alpha),
        set_size_figure(rows, os.path.join(out_dir, f"{stem}_set_size.png")),
        class_coverage_figure(
            rows, os.path.join(out_dir, f"{stem}_class_coverage.png"), alpha
        ),
    ]
    return written
