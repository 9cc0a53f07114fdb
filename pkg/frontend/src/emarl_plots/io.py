"""Metrics CSV loading and the independent overall win-rate computation."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np

# Column order written by the training harness.
SCHEMA = ("seed", "env_steps", "test_win_rate", "mean_test_return",
          "mean_rp", "buffer_size", "embedder_loss", "wall_clock_s")
_INT_COLUMNS = {"seed", "env_steps", "buffer_size"}


@dataclass(frozen=True)
class RunSeries:
    """One run: a shared eval grid plus a win-rate curve per seed."""

    label: str
    steps: np.ndarray   # (m,) env steps, strictly increasing
    curves: np.ndarray  # (n_seeds, m) win rates
    seeds: tuple

    def __post_init__(self):
        if self.curves.ndim != 2 or self.curves.shape[1] != self.steps.size:
            raise ValueError("seeds disagree with the eval grid")


def _default_label(path: str) -> str:
    parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return parent or os.path.splitext(os.path.basename(path))[0]


def _parse_rows(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        for col in SCHEMA:
            if col not in header:
                raise ValueError(f"{path}: missing column {col!r}")
        for col in header:
            if col not in SCHEMA:
                raise ValueError(f"{path}: unexpected column {col!r}")
        rows = []
        for i, raw in enumerate(reader, start=2):
            parsed = {}
            for col in SCHEMA:
                try:
                    parsed[col] = (int(raw[col]) if col in _INT_COLUMNS
                                   else float(raw[col]))
                except (TypeError, ValueError):
                    raise ValueError(
                        f"{path}: line {i}: bad value for column {col!r}")
            rows.append(parsed)
    return rows


def load_run(path: str, label: str | None = None) -> RunSeries:
    rows = _parse_rows(path)
    label = label if label is not None else _default_label(path)
    if not rows:
        warnings.warn(f"{path}: no data rows", stacklevel=2)
        return RunSeries(label=label, steps=np.array([]),
                         curves=np.zeros((0, 0)), seeds=())
    by_seed: dict[int, list[dict]] = {}
    for row in rows:
        by_seed.setdefault(row["seed"], []).append(row)
    seeds = tuple(sorted(by_seed))
    grids = []
    curves = []
    for seed in seeds:
        seed_rows = by_seed[seed]
        steps = np.array([r["env_steps"] for r in seed_rows], dtype=np.float64)
        if np.any(np.diff(steps) <= 0):
            raise ValueError(
                f"{path}: seed {seed}: column 'env_steps' not strictly "
                f"increasing")
        grids.append(steps)
        curves.append([r["test_win_rate"] for r in seed_rows])
    for seed, grid in zip(seeds[1:], grids[1:]):
        if not np.array_equal(grid, grids[0]):
            raise ValueError(
                f"{path}: seed {seed}: column 'env_steps' grid differs "
                f"between seeds")
    return RunSeries(label=label, steps=grids[0],
                     curves=np.array(curves, dtype=np.float64), seeds=seeds)


def load_runs(paths: list[str], labels: list[str] | None = None) -> list[RunSeries]:
    if labels is not None and len(labels) != len(paths):
        raise ValueError(
            f"got {len(labels)} labels for {len(paths)} metrics files")
    out = []
    for i, path in enumerate(paths):
        out.append(load_run(path, labels[i] if labels else None))
    return out


def _curve_integral(steps: np.ndarray, curve: np.ndarray,
                    horizon: float) -> float:
    # plain segment walk; deliberately not delegated to a library integrator
    total = 0.0
    for i in range(steps.size - 1):
        x0, x1 = steps[i], steps[i + 1]
        y0, y1 = curve[i], curve[i + 1]
        if x1 <= horizon:
            total += 0.5 * (y0 + y1) * (x1 - x0)
        else:
            if x0 < horizon:
                y_cut = y0 + (y1 - y0) * (horizon - x0) / (x1 - x0)
                total += 0.5 * (y0 + y_cut) * (horizon - x0)
            break
    return total


def overall_winrate(series: RunSeries, horizon: float) -> float:
    """Mean over seeds of the [0, horizon] trapezoid integral of the win-rate
    curve, divided by the horizon."""
    if series.steps.size == 0:
        raise ValueError("empty series")
    if series.steps[0] > 0:
        raise ValueError("eval grid must start at 0")
    if not 0 < horizon <= series.steps[-1]:
        raise ValueError("horizon must lie in (0, last eval point]")
    acc = sum(_curve_integral(series.steps, curve, horizon)
              for curve in series.curves)
    return acc / (horizon * series.curves.shape[0])
