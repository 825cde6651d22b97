"""Command-line entry point: ``coopir <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import sys

from .degrade import ConfigError
from .grad import NumericAbort
from .harness import COMMANDS, DEFAULT_CONFIG, flat_keys, load_config, run_command
from .plansearch import BudgetError

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coopir", description="Cooperative multi-tool restoration experiments.")
    parser.add_argument("--list-keys", action="store_true", help="print every config key with its default")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (merged over the defaults)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path; the value is parsed as JSON")
        p.add_argument("--out", help="shorthand for --set output_dir=PATH")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _progress(quiet: bool):
    if quiet:
        return None

    def show(i, info):
        if isinstance(info, dict):
            body = " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items())
            print(f"[{i}] {body}", file=sys.stderr, flush=True)
        else:
            print(f"[{i}/{info}]", file=sys.stderr, flush=True)
    return show


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_keys:
        cfg = load_config()
        for key in flat_keys(DEFAULT_CONFIG):
            node = cfg
            for part in key.split("."):
                node = node[part]
            print(f"{key} = {json.dumps(node)}")
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(("output_dir", args.out))
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    try:
        cfg = load_config(args.config, overrides)
        result = run_command(args.command, cfg, _progress(args.quiet))
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
