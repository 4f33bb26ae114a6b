"""Matplotlib defaults for report figures."""

import matplotlib

matplotlib.use("Agg")

import matplotlib as mpl
import matplotlib.pyplot as plt
import numpy as np

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
fig_size = [fig_width, fig_width * golden_mean]

colors = ["#08589e", "#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#666666"]

params = {
    "axes.prop_cycle": mpl.cycler(color=colors),
    "axes.labelsize": 10,
    "axes.grid": True,
    "grid.color": "#DDD",
    "font.size": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "figure.figsize": fig_size,
    "figure.dpi": 120,
    "figure.constrained_layout.use": True,
    "lines.markersize": 5,
    "lines.linewidth": 1.5,
    # keep PNG output byte-stable between runs
    "svg.hashsalt": "vitmerge",
}


def new_figure(ncols=1, width_scale=1.0):
    with mpl.rc_context(params):
        fig, ax = plt.subplots(ncols=ncols, figsize=(fig_size[0] * width_scale, fig_size[1]))
    return fig, ax


def save(fig, path):
    with mpl.rc_context(params):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
