"""Figures for subset reports: per-subset mIoU bars, one series per report."""

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib import pyplot

FRAME = "0.35"


def style_axes(ax, xlabel=None, ylabel=None, title=None):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    for spine in ax.spines.values():
        spine.set_edgecolor(FRAME)
    ax.tick_params(color=FRAME, labelcolor=FRAME, labelsize=8)
    if xlabel:
        ax.set_xlabel(xlabel, color=FRAME)
    if ylabel:
        ax.set_ylabel(ylabel, color=FRAME)
    if title:
        ax.set_title(title, color=FRAME, fontsize=10)


def write_plot_data(path, subsets, series):
    """Whitespace-delimited ``index subset value...`` table, one column per series."""
    names = list(series)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x subset " + " ".join(names) + "\n")
        for i, s in enumerate(subsets):
            vals = " ".join(f"{series[n][i]:.9g}" for n in names)
            fh.write(f"{i} {s} {vals}\n")


def subset_bars(path, subsets, series, metric="mIoU"):
    """Grouped bars of ``series[name][i]`` (fractions) over ``subsets``; dashed lines mark means."""
    names = list(series)
    x = np.arange(len(subsets))
    width = 0.8 / max(len(names), 1)
    fig, ax = pyplot.subplots(figsize=(max(6.0, 0.45 * len(subsets) * max(len(names), 1)), 3.4))
    colours = pyplot.cm.viridis(np.linspace(0.15, 0.85, max(len(names), 1)))
    for k, name in enumerate(names):
        vals = 100 * np.asarray(series[name], dtype=float)
        ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width, label=name, color=colours[k])
        ax.axhline(np.nanmean(vals), color=colours[k], lw=0.8, ls="--")
    ax.set_xticks(x)
    ax.set_xticklabels(subsets, rotation=60, ha="right")
    style_axes(ax, ylabel=f"{metric} (%)", title=f"{metric} per modality subset")
    if len(names) > 1:
        ax.legend(frameon=False, fontsize=7, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    pyplot.close(fig)
