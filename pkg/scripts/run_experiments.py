#!/usr/bin/env python
"""Run the full experiment suite with the shipped default config.

Thin wrapper over the CLI so `python scripts/run_experiments.py out/` works
from a source checkout without installing entry points.
"""

import sys

from mcscan.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "out"
    raise SystemExit(main(["all", "--out", out] + sys.argv[2:]))
