"""Command line interface: ``superlab <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import sys

from . import config as cf
from . import runner


def _add_field(p, f: cf.Field):
    flag = "--" + f.name.replace("_", "-")
    s = f.schema
    kw = {"dest": f.name, "default": None, "help": f"{f.help} (default {f.default!r})"}
    if s.get("type") == "boolean":
        p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
    elif s.get("type") == "array":
        p.add_argument(flag, type=float, nargs="*", **kw)
    elif "enum" in s:
        p.add_argument(flag, choices=s["enum"], **kw)
    elif s.get("type") == "integer":
        p.add_argument(flag, type=lambda v: int(float(v)), **kw)
    else:
        p.add_argument(flag, type=float, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="superlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in cf.COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config or manifest.json of an earlier run")
        p.add_argument("--out", help="output directory (replaced atomically)")
        p.add_argument("--workers", type=int, default=1, help="replica worker threads")
        names = {f.name for f in cf.fields(name)}
        for f in cf.fields(name):
            _add_field(p, f)
        # --seed and --replicas are accepted everywhere; they are ignored by
        # subcommands without randomness
        if "seed" not in names:
            p.add_argument("--seed", type=int, default=None, dest="_seed", help=argparse.SUPPRESS)
        if "replicas" not in names:
            p.add_argument("--replicas", type=int, default=None, dest="_replicas",
                           help=argparse.SUPPRESS)
    p = sub.add_parser("report", help="verify an output directory against its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, dest="_seed", help=argparse.SUPPRESS)
    p.add_argument("--replicas", type=int, default=None, dest="_replicas", help=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return runner.report(args.out)
    overrides = {f.name: getattr(args, f.name) for f in cf.fields(args.command)}
    try:
        doc = cf.load(args.config) if args.config else None
        code, _ = runner.run(args.command, doc, overrides, args.out, args.workers)
    except cf.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return runner.EXIT_CONFIG
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return runner.EXIT_FAILED
    return code


if __name__ == "__main__":
    sys.exit(main())
