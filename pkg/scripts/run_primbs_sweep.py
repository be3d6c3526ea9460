#!/usr/bin/env python3
"""Nonlinear-benchmark initial-condition sweep over [-5, 5]^2.

The coefficient lower bound of one is active by default for this benchmark.
Writes cells.csv / summary.csv / contour.svg under out/primbs_sweep.
"""

import sys

from shapedmpc.cli import main

if __name__ == "__main__":
    args = [
        "sweep",
        "--benchmark", "primbs",
        "--points", "21",
        "--workers", "8",
        "--max-steps", "600",
        "--out-dir", "out/primbs_sweep",
    ] + sys.argv[1:]
    raise SystemExit(main(args))
