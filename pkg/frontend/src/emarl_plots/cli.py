"""Console entry points: plot_curves and plot_mu."""

from __future__ import annotations

import argparse
import sys

from .figures import plot_curves, plot_mu
from .io import load_runs


def curves_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot_curves",
        description="learning-curve figure from emarl metrics CSV files")
    parser.add_argument("metrics", nargs="+", help="metrics.csv paths")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--labels", nargs="+", help="one label per file")
    try:
        args = parser.parse_args(argv)
        series = load_runs(args.metrics, args.labels)
        plot_curves(series, args.out)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


def mu_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot_mu",
        description="overall win-rate bar chart from emarl metrics CSV files")
    parser.add_argument("metrics", nargs="+", help="metrics.csv paths")
    parser.add_argument("--horizon", type=float, required=True,
                        help="env-step horizon for the integral")
    parser.add_argument("--out", default="mu_w.png", help="output image path")
    parser.add_argument("--labels", nargs="+", help="one label per file")
    try:
        args = parser.parse_args(argv)
        series = load_runs(args.metrics, args.labels)
        values = plot_mu(series, args.horizon, args.out)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for label, value in values:
        print(f"{label}\t{value:.9g}")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(curves_main())
