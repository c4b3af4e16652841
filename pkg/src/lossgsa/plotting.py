"""Figures written next to the CSV reports.

Every function takes already-computed arrays, draws one figure and saves it
to ``fig_file``. Nothing here feeds back into the numbers.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FTYPE = "png"
DPI = 120
# keeps PNG bytes stable across runs
_METADATA = {"Software": None}


def _save(fig, fig_file):
    fig.tight_layout()
    fig.savefig(fig_file, dpi=DPI, metadata=_METADATA)
    plt.close(fig)
    return fig_file


def sensitivity_bars(names, S_normalized, per_chain_S=None, fig_file="sensitivities.png"):
    """Normalized indices as bars, with one marker per chain when given."""
    names = list(names)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5.0, 0.6 * len(names) + 2), 3.5))
    ax.bar(x, S_normalized, color="0.75", edgecolor="k", label="pooled")
    if per_chain_S is not None and len(per_chain_S) > 1:
        per_chain = np.asarray(per_chain_S, dtype=float)
        per_chain = per_chain / per_chain.sum(axis=1, keepdims=True)
        offsets = np.linspace(-0.3, 0.3, len(per_chain))
        for i, (row, off) in enumerate(zip(per_chain, offsets)):
            ax.plot(x + off, row, "o", ms=4, label=f"chain {i}")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("normalized sensitivity")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, fig_file)


def correlation_heatmap(names, corr, fig_file="correlations.png"):
    names = list(names)
    fig, ax = plt.subplots(figsize=(0.45 * len(names) + 2.5, 0.45 * len(names) + 2))
    im = ax.imshow(corr, vmin=-1, vmax=1, cmap="RdBu_r")
    ax.set_xticks(range(len(names)))
    ax.set_yticks(range(len(names)))
    ax.set_xticklabels(names, rotation=90)
    ax.set_yticklabels(names)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    return _save(fig, fig_file)


def perturbation_plot(names, h_grid, curves, fig_file="perturbation_curves.png"):
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, curve in zip(names, curves):
        ax.plot(h_grid, curve, label=name)
    ax.set_xlabel("relative temperature perturbation h")
    ax.set_ylabel("normalized sensitivity")
    ax.legend(fontsize=7, ncol=2, loc="best")
    return _save(fig, fig_file)


def trace_panels(traces, burn_in, ylabel, fig_file="traces.png"):
    """One panel per chain, burn-in shaded."""
    n = len(traces)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n + 1, 2.6), sharey=True, squeeze=False)
    for i, (ax, tr) in enumerate(zip(axes[0], traces)):
        step = max(1, len(tr) // 4000)
        idx = np.arange(0, len(tr), step)
        ax.plot(idx, np.asarray(tr)[idx], lw=0.5, color="k")
        ax.axvspan(0, burn_in, color="0.85")
        ax.set_title(f"chain {i}", fontsize=8)
        ax.tick_params(labelsize=7)
    axes[0][0].set_ylabel(ylabel)
    return _save(fig, fig_file)


def probe_outputs(columns, tables, reference=None, fig_file="probe.png"):
    """Model outputs for each uniform draw, against the reference output.

    ``tables`` are arrays whose last column is the output; the output is
    plotted against the row index, which for gridded models walks the grid.
    """
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for tab in tables:
        ax.plot(np.asarray(tab)[:, -1], color="0.6", lw=0.6)
    if reference is not None:
        ax.plot(np.asarray(reference)[:, -1], color="k", lw=1.2, label="reference point")
        ax.legend(fontsize=7)
    ax.set_xlabel("output index")
    ax.set_ylabel(columns[-1])
    return _save(fig, fig_file)
