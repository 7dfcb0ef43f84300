"""Command-line entry point.

``mvdelay <subcommand> --config cfg.json --out DIR [--seed S] [--threads N]``

Exit status: 0 success, 2 an acceptance check failed, 1 operational error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .experiments import COMMANDS, load_spec, write_result

log = logging.getLogger("mvdelay")

SUBCOMMANDS = ("simulate", "contract", "chaos", "moments", "girsanov", "rates")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvdelay", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mvdelay {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="scenario + experiment JSON")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the scenario seed (u64)")
        s.add_argument("--threads", type=int, default=None,
                       help="worker threads (MVDELAY_THREADS overrides); results do not depend on it")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _kind(command: str, raw: dict) -> str:
    if command != "contract":
        return command
    kind = raw.get("experiment", {}).get("kind", "contract_sync")
    if kind not in ("contract_sync", "contract_reflect"):
        raise ValueError(f"contract needs kind contract_sync or contract_reflect, got {kind!r}")
    return kind


def threads_from(arg: int | None) -> int:
    env = os.environ.get("MVDELAY_THREADS")
    if env:
        return max(1, int(env))
    return max(1, arg or 1)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = threads_from(args.threads)
        with open(args.config) as fh:
            raw = json.load(fh)
        kind = _kind(args.command, raw)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ValueError("--seed must be an unsigned 64-bit integer")
        spec = load_spec(raw, kind=kind, seed=args.seed)
        log.info("running %s with %d thread(s)", kind, threads)
        result = COMMANDS[kind](spec)
        paths = write_result(result, args.out, spec)
    except Exception as exc:  # operational failure: report and exit 1
        print(f"mvdelay: error: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    if not result.passed:
        print("mvdelay: acceptance check failed", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
