#!/usr/bin/env python3
"""Mass-spring-damper initial-condition sweep over [-1, 1]^2.

Reproduces the linear-benchmark comparison: both closed loops per grid cell,
cells.csv / summary.csv / contour.svg under out/msd_sweep.
"""

import sys

from shapedmpc.cli import main

if __name__ == "__main__":
    args = [
        "sweep",
        "--benchmark", "msd",
        "--points", "21",
        "--workers", "8",
        "--out-dir", "out/msd_sweep",
    ] + sys.argv[1:]
    raise SystemExit(main(args))
