"""Command-line driver.

    trsbench {train,attack,transfer,bounds,boundary,report,all} --config FILE
             [--seed N] [--out DIR]

``TRSBENCH_NUM_THREADS`` sets the torch intra-op thread count; it changes
speed only.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import torch

from .config import ConfigError, load_config
from .experiment import STAGES, StageError, run_experiment

THREADS_ENV = "TRSBENCH_NUM_THREADS"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trsbench", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=[*STAGES, "all"])
    p.add_argument("--config", required=True, help="INI experiment file")
    p.add_argument("--seed", type=int, default=None, help="run a single seed, overriding the config")
    p.add_argument("--out", default=None, help="output directory (default: from the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _print_summary(summary: dict) -> None:
    keys = sorted({k for stats in summary.values() for k in stats})
    width = max([len(k) for k in keys] + [8])
    print(" " * width + "".join(f"{m:>11s}" for m in summary))
    for k in keys:
        cells = []
        for m in summary:
            v = summary[m].get(k, math.nan)
            cells.append(f"{v:11.4f}")
        print(f"{k:<{width}s}" + "".join(cells))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            print(f"[config] {THREADS_ENV} must be an integer", file=sys.stderr)
            return 2
    try:
        cfg = load_config(args.config)
    except (OSError, ConfigError) as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.with_seeds([args.seed])
    out = Path(args.out or cfg.out)
    stages = STAGES if args.command == "all" else (args.command,)
    try:
        result = run_experiment(cfg, out, stages, config_text=Path(args.config).read_text())
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    if args.command in ("report", "all") and result:
        _print_summary(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
