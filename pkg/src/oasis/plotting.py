"""Static SVG figures for simulation results."""

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import NoDataError  # noqa: E402
from .sim import summarize  # noqa: E402

__all__ = ["emit_plots", "box_figure", "coverage_figure"]

METHOD_ORDER = ("oasis", "cb")
METHOD_LABEL = {"oasis": "OASIS", "cb": "CB"}
# deterministic SVG output
matplotlib.rcParams["svg.hashsalt"] = "oasis"


def _cells(rows):
    deltas = sorted({r["delta"] for r in rows})
    dens = sorted({(r["d_ba"], r["d_er"]) for r in rows}, key=lambda t: (t[0] + t[1], t))
    return deltas, dens


def box_figure(rows):
    """Grid of error box plots: rows are delta values, columns are densities.

    Returns ``(figure, axes)`` with ``axes[a][b]`` the panel of cell (a, b).
    """
    deltas, dens = _cells(rows)
    lookup = {(r["delta"], r["d_ba"], r["d_er"], r["method"]): r for r in rows}
    methods = [m for m in METHOD_ORDER if any(r["method"] == m for r in rows)]
    fig, axes = plt.subplots(len(deltas), len(dens), squeeze=False,
                             figsize=(3.2 * len(dens) + 0.8, 2.8 * len(deltas) + 0.6),
                             sharey="row")
    for a, delta in enumerate(deltas):
        for b, (d_ba, d_er) in enumerate(dens):
            ax = axes[a][b]
            stats = []
            for m in methods:
                r = lookup.get((delta, d_ba, d_er, m))
                if r is None:
                    continue
                stats.append({"label": METHOD_LABEL[m], "med": r["median"], "q1": r["q1"],
                              "q3": r["q3"], "whislo": r["whislo"], "whishi": r["whishi"],
                              "fliers": r["fliers"]})
            if stats:
                ax.bxp(stats, showfliers=True)
            ax.axhline(0.0, color="0.6", lw=0.8, ls="--")
            ax.set_title(f"delta={delta:g}, d={d_ba:g}+{d_er:g}", fontsize=9)
            if b == 0:
                ax.set_ylabel("estimate - truth")
    fig.tight_layout()
    return fig, axes


def coverage_figure(rows):
    """Bar chart of empirical coverage per cell and method, with binomial error bars."""
    deltas, dens = _cells(rows)
    lookup = {(r["delta"], r["d_ba"], r["d_er"], r["method"]): r for r in rows}
    methods = [m for m in METHOD_ORDER if any(r["method"] == m for r in rows)]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(rows) / max(len(methods), 1) + 1.5), 3.2))
    cells = [(d, ba, er) for d in deltas for ba, er in dens]
    width = 0.8 / max(len(methods), 1)
    for k, m in enumerate(methods):
        xs, ys, es = [], [], []
        for c, cell in enumerate(cells):
            r = lookup.get((*cell, m))
            if r is not None:
                xs.append(c + (k - (len(methods) - 1) / 2) * width)
                ys.append(r["coverage"])
                es.append(r["coverage_se"])
        ax.bar(xs, ys, width, yerr=es, label=METHOD_LABEL[m], capsize=2)
    ax.axhline(0.95, color="k", lw=0.8, ls="--")
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels([f"{d:g}\n{ba:g}+{er:g}" for d, ba, er in cells], fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("coverage")
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    return fig, ax


def emit_plots(results, out_dir, prefix=""):
    """Box plots of estimation errors per (delta, density) cell and a coverage chart.

    Box statistics come straight from :func:`summarize`, and are also written
    to ``plot_stats.json``.  Returns the list of files written.
    """
    if not results:
        raise NoDataError("no trial results to plot")
    rows = summarize(results)
    os.makedirs(out_dir, exist_ok=True)

    fig, _ = box_figure(rows)
    box_path = os.path.join(out_dir, f"{prefix}errors.svg")
    fig.savefig(box_path, format="svg", metadata={"Date": None})
    plt.close(fig)

    fig, _ = coverage_figure(rows)
    cov_path = os.path.join(out_dir, f"{prefix}coverage.svg")
    fig.savefig(cov_path, format="svg", metadata={"Date": None})
    plt.close(fig)

    stats_path = os.path.join(out_dir, f"{prefix}plot_stats.json")
    with open(stats_path, "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    return [box_path, cov_path, stats_path]
