"""Figure rendering. Uses the Agg backend so output is a file, never a
window, and the same inputs always produce the same bytes."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import RunSeries, overall_winrate

_FIGSIZE = (7.0, 4.5)
_DPI = 150


def _save(fig, out_path: str) -> None:
    # empty metadata keeps repeated renders byte-identical
    fig.savefig(out_path, metadata={"Software": ""})
    plt.close(fig)


def render_curves(series_list: list[RunSeries]):
    """Mean win-rate line per run with a band of +-1 std across seeds
    (population std over the seed sample: two seeds at m-d and m+d give a
    band half-width of exactly d)."""
    if not series_list:
        raise ValueError("need at least one series")
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    for series in series_list:
        if series.steps.size == 0:
            continue
        mean = series.curves.mean(axis=0)
        std = series.curves.std(axis=0)
        line, = ax.plot(series.steps, mean, label=series.label)
        ax.fill_between(series.steps, mean - std, mean + std,
                        color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("test win-rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig


def plot_curves(series_list: list[RunSeries], out_path: str) -> None:
    _save(render_curves(series_list), out_path)


def render_mu(series_list: list[RunSeries], horizon: float):
    if not series_list:
        raise ValueError("need at least one series")
    values = [(s.label, overall_winrate(s, horizon)) for s in series_list]
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    xs = np.arange(len(values))
    heights = [v for _, v in values]
    ax.bar(xs, heights, width=0.6)
    for x, h in zip(xs, heights):
        ax.annotate(f"{h:.3f}", (x, h), ha="center", va="bottom", fontsize=9)
    ax.set_xticks(xs)
    ax.set_xticklabels([lbl for lbl, _ in values], rotation=15, ha="right")
    ax.set_ylabel(f"overall win-rate (horizon {horizon:g})")
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return fig, values


def plot_mu(series_list: list[RunSeries], horizon: float,
            out_path: str) -> list[tuple[str, float]]:
    """Bar chart of the overall win-rate per run at the given horizon.
    Returns (label, value) pairs in input order."""
    fig, values = render_mu(series_list, horizon)
    _save(fig, out_path)
    return values
