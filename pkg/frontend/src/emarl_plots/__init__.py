"""Plotting companion for emarl experiment artifacts.

Consumes metrics.csv files produced by the training harness, recomputes the
overall win-rate independently, and renders learning-curve and bar figures.
"""

from .io import RunSeries, load_runs, overall_winrate
from .figures import plot_curves, plot_mu

__all__ = ["RunSeries", "load_runs", "overall_winrate", "plot_curves",
           "plot_mu"]
