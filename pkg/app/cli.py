"""Command-line entry: ``python -m app.cli <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sqlite3
import sys
from typing import Sequence

from app.artifacts import dumps_json
from app.config import load_settings
from app.errors import BevAlignError
from app.storage import RunStore
from app.workflow import COMMANDS, load_run_config, run_command

logger = logging.getLogger("bevalign")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevalign", description="BEV alignment workflows")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="JSON run config")
        cmd.add_argument("--seed", type=int)
        cmd.add_argument("--out", help="artifact directory")
        cmd.add_argument("--k-graph", type=int, dest="k_graph")
        cmd.add_argument("--sweep-k", action="store_true", dest="sweep_k")
        cmd.add_argument("--noise-rot-deg", type=float, dest="noise_rot_deg")
        cmd.add_argument("--noise-trans-m", type=float, dest="noise_trans_m")
        cmd.add_argument("--bev-shift-max", type=int, dest="bev_shift_max")
        cmd.add_argument("--no-record", action="store_true", help="skip the run registry")
    return parser


def _open_store(db_path: str) -> RunStore | None:
    try:
        return RunStore(db_path)
    except (OSError, sqlite3.Error) as exc:
        logger.warning("run registry unavailable at %s: %s", db_path, exc)
        return None


def main(argv: Sequence[str] | None = None) -> int:
    settings = load_settings()
    logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO))
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return 2

    try:
        config = load_run_config(
            args.config or settings.default_config,
            seed=args.seed,
            out=args.out,
            k_graph=args.k_graph,
            sweep_k=args.sweep_k,
            noise_rot_deg=args.noise_rot_deg,
            noise_trans_m=args.noise_trans_m,
            bev_shift_max=args.bev_shift_max,
        )
        store = None if args.no_record else _open_store(settings.db_path)
        run_id, summary = run_command(args.command, config, store)
    except BevAlignError as exc:
        logger.error("%s failed (%s): %s", args.command, exc.__class__.__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code

    logger.info("%s finished run_id=%s", args.command, run_id)
    sys.stdout.write(dumps_json(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
