"""``nhsub`` command line: run, validate and list-families."""

from __future__ import annotations

import argparse
import os
import sys

from .config import FAMILIES, ConfigError, read_config
from .experiments import EXIT_CONFIG, run


def _threads_from_env():
    val = os.environ.get("NHSUB_THREADS")
    if not val:
        return None
    try:
        n = int(val)
    except ValueError:
        raise SystemExit(f"NHSUB_THREADS must be a positive integer, got {val!r}")
    if n < 1:
        raise SystemExit(f"NHSUB_THREADS must be a positive integer, got {val!r}")
    return n


def _load(path):
    try:
        return read_config(path)
    except OSError as exc:
        print(f"config error: cannot read {path}: {exc.strerror}", file=sys.stderr)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
    return None


def _cmd_run(args):
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_CONFIG
    threads = args.threads if args.threads is not None else _threads_from_env()
    code, where = run(cfg, outdir=args.outdir, seed=args.seed, threads=threads)
    if where:
        print(where)
    return code


def _cmd_validate(args):
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_CONFIG
    print(f"# {cfg.experiment} ({cfg.family}): valid")
    for line in cfg.canonical():
        print(line)
    return 0


def _cmd_families(args):
    for name, (keys, desc) in FAMILIES.items():
        print(f"{name}: {desc} [keys: {', '.join(keys)}]")
    return 0


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="nhsub", description="Non-homogeneous subordinator "
                                "simulation and cross-checks.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--outdir", help="output root (default: config 'outdir' or ./out)")
    r.add_argument("--seed", type=_nonneg_int, help="override the config seed")
    r.add_argument("--threads", type=_pos_int, help="worker threads (default NHSUB_THREADS)")
    r.set_defaults(func=_cmd_run)
    v = sub.add_parser("validate", help="parse and validate a config")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)
    f = sub.add_parser("list-families", help="list built-in families")
    f.set_defaults(func=_cmd_families)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
