"""Command-line entry point.

    insider-donsker <command> --config PATH [--seed N] [--out DIR] [--paths N]

Exit codes: 0 success, 1 invariant failure, 2 configuration error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..errors import ConfigError, InsiderControlError
from . import config as config_mod
from .runs import run_density, run_foc, run_policy, run_simulate, run_solve_c
from .verify import run_verify

RUNNERS = {
    "density": run_density,
    "policy": run_policy,
    "simulate": run_simulate,
    "foc": run_foc,
    "solve-c": run_solve_c,
    "verify": run_verify,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="insider-donsker",
        description="Conditional densities, insider portfolios and Monte Carlo checks.",
    )
    parser.add_argument("command", choices=sorted(RUNNERS))
    parser.add_argument("--config", required=True, help="TOML experiment file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (overrides config 'out')")
    parser.add_argument("--paths", type=int, help="override n_paths")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_mod.load(args.config, seed=args.seed, n_paths=args.paths, out=args.out)
        summary = RUNNERS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return exc.exit_code
    except InsiderControlError as exc:
        print(f"numerical error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command == "verify":
        for entry in summary["checks"]:
            status = "PASS" if entry["passed"] else "FAIL"
            detail = entry.get("error", entry["measured"])
            print(f"{status} {entry['module']}:{entry['name']} measured={detail} threshold={entry['threshold']}")
        return 0 if summary["passed"] else 1
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
