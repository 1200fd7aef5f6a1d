"""Command-line entry point for the experiment suite.

Verbs: ``e1`` (parameter recovery), ``e2`` (stabilisation NCC), ``e3``
(tumour scan and reconstruction), ``all``. Each takes a YAML config, an
output directory and an optional master-seed override; ``--no-compensation``
restricts E2/E3 to the ablation arm and ``--dump-frames`` writes captured
B-mode images as PGM files.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .config import default_config, load_config
from .experiments import run_all, run_e1, run_e2, run_e3

_RUNNERS = {"e1": run_e1, "e2": run_e2, "e3": run_e3, "all": run_all}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcscan",
        description="Deterministic experiments for motion-compensated "
                    "robotic ultrasound scanning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("e1", "motion parameter recovery trials"),
            ("e2", "dwell stabilisation NCC with/without compensation"),
            ("e3", "full scan, reconstruction and scoring"),
            ("all", "run every experiment")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None,
                       help="YAML config path (default: built-in config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        p.add_argument("--no-compensation", action="store_true",
                       help="run only the uncompensated arm (e2/e3)")
        p.add_argument("--dump-frames", action="store_true",
                       help="write captured frames as PGM images (e3)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)

    kwargs = {"dump_frames": args.dump_frames}
    if args.command != "e1":
        kwargs["compensation"] = False if args.no_compensation else None
    summary = _RUNNERS[args.command](cfg, args.out, **kwargs)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
