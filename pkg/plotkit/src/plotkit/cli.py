"""Command-line figure generation.

    plot-curves --csv run1.csv --csv run2.csv --out fig.png [--ref VALUE]
    plot-sweep --csv summary.csv --x L --out fig.png [--ref VALUE]

Exit codes: 0 success, 1 schema/data error, 3 I/O error.
"""

import argparse
import sys

from .errors import PlotkitError
from .figures import CurveSpec, plot_curves, plot_sweep


def main_curves(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plot-curves",
                                     description="learning curves from run CSVs")
    parser.add_argument("--csv", action="append", required=True,
                        help="run metrics CSV (repeatable)")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--ref", type=float, default=None,
                        help="horizontal reference line")
    args = parser.parse_args(argv)
    try:
        path = plot_curves(CurveSpec(csv_paths=args.csv, out_path=args.out,
                                     reference=args.ref))
    except PlotkitError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 3
    print(path)
    return 0


def main_sweep(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plot-sweep",
                                     description="accuracy vs swept parameter")
    parser.add_argument("--csv", required=True, help="compare summary CSV")
    parser.add_argument("--x", required=True, choices=("L", "W"),
                        help="swept column")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--ref", type=float, default=None,
                        help="horizontal reference line")
    args = parser.parse_args(argv)
    try:
        path = plot_sweep(args.csv, args.x, args.out, reference=args.ref)
    except PlotkitError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"io error: {err}", file=sys.stderr)
        return 3
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main_curves())
