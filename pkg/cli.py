"""
Command line for the long-range MFG workflows.

    uv run python cli.py solve data/two_state_monotone.json --out outputs/two_state
    uv run python cli.py nash-gap data/two_body_average.json --threads 4
    uv run python cli.py graphon data/graphon_average.json --seed 7
    uv run python cli.py check-monotone data/two_state_monotone.json
    uv run python cli.py solve data/two_state_monotone.json --dump-normalized

Exit status: 0 success, 1 invalid input or I/O failure, 2 solver did not
converge, 3 monotonicity check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from config import DEFAULT_THREADS, LOG_FORMAT
from services.config_service import apply_seed_override, dump_normalized, load_config
from services.experiments_service import EXIT_INVALID, WORKFLOWS
from utils.errors import MfgError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longrange-mfg", description=__doc__.splitlines()[1])
    parser.add_argument("command", choices=sorted(WORKFLOWS))
    parser.add_argument("config", help="experiment config (JSON)")
    parser.add_argument("--out", default=None, help="output directory (default: output.directory or ./outputs)")
    parser.add_argument("--threads", type=int, default=DEFAULT_THREADS, help="worker cap for parallel library calls")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    parser.add_argument(
        "--dump-normalized",
        action="store_true",
        help="print the fully defaulted config and exit without running",
    )
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)

    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID

    if args.dump_normalized:
        try:
            config = apply_seed_override(load_config(args.config), args.seed)
        except MfgError as e:
            print(str(e), file=sys.stderr)
            return EXIT_INVALID
        print(dump_normalized(config))
        return 0

    result = WORKFLOWS[args.command](args.config, out=args.out, threads=args.threads, seed=args.seed)
    if result["status"] == "error":
        print(result["message"], file=sys.stderr)
    else:
        print(json.dumps(result, indent=2, default=str))
    return int(result["exit_code"])


if __name__ == "__main__":
    sys.exit(main())
