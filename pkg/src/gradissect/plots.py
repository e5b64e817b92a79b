"""Figure rendering for experiment output.

Figures are written as SVG files next to the CSV output, one per
experiment group, and are meant for human inspection only; nothing parses
them back.
"""

from __future__ import annotations

import os
import re

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_")


_METHOD_COLORS = {
    "sgd": "tab:blue",
    "ssd": "tab:orange",
    "m-sgd": "tab:blue",
    "m-ssd": "tab:orange",
    "svag": "tab:green",
    "m-svag": "tab:green",
    "m-svag-mb": "tab:olive",
    "adam": "tab:red",
    "adam-star": "tab:purple",
    "idealized-svag": "tab:cyan",
}


def emit_svg(records, out_dir, logy: bool = True, logx: bool = False) -> list[str]:
    """One loss-curve SVG per experiment group; lines keyed by method and seed.

    Returns the written paths.  A log loss axis is the default since most
    runs decay over orders of magnitude; non-positive losses fall back to a
    linear axis.
    """
    if not records:
        raise ValueError("no records to plot")
    os.makedirs(out_dir, exist_ok=True)
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.experiment, []).append(r)
    paths = []
    for experiment in sorted(groups):
        group = groups[experiment]
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        labeled = set()
        for r in group:
            color = _METHOD_COLORS.get(r.method, "tab:gray")
            label = r.method if r.method not in labeled else None
            labeled.add(r.method)
            ax.plot(r.steps, r.losses, color=color, alpha=0.7, lw=1.0, label=label)
        if logy and all(min(r.losses) > 0.0 for r in group):
            ax.set_yscale("log")
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(experiment)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best", fontsize=9)
        path = os.path.join(out_dir, _slug(experiment) + ".svg")
        fig.savefig(path, format="svg")
        plt.close(fig)
        paths.append(path)
    return paths


def emit_factor_curve_svg(table, path) -> str:
    """Plot the three adaptation-factor curves against relative stddev."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    eta = table[:, 0]
    for col, label, style in (
        (1, "optimal sign factor", "-"),
        (2, "square-root factor", "--"),
        (3, "direct factor", ":"),
    ):
        ax.plot(eta, table[:, col], style, label=label)
    ax.set_xlabel("relative standard deviation")
    ax.set_ylabel("adaptation factor")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best")
    fig.savefig(path, format="svg")
    plt.close(fig)
    return str(path)
