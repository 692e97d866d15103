"""``ucplab`` command line: one subcommand per experiment kind plus ``validate`` and ``plotdata``.

Exit status: 0 when every verdict-bearing row passes, 1 when some row fails,
2 for configuration or usage errors, 3 when a run aborts with a numerical error.
"""

from __future__ import annotations

import argparse
import sys

from .config import KINDS, ConfigError, load_config
from .plotdata import emit_plotdata
from .runner import RunError, load_record, run


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="TOML experiment file")
    p.add_argument("--out", default=None, help="output directory (default: the config's 'output')")
    p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    p.add_argument("--jobs", type=int, default=1, help="worker threads; output order is unchanged")
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True,
                   help="reject unknown keys (default); --no-strict turns them into warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ucplab", description="Unique-continuation experiment runner.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        _add_run_args(sub.add_parser(kind, help=f"run a '{kind}' sweep"))
    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("--config", required=True)
    v.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True)
    pd = sub.add_parser("plotdata", help="tab-separated series from result JSON files")
    pd.add_argument("results", nargs="+", help="JSON mirrors written by a run")
    pd.add_argument("--out", default=None, help="output file (default: stdout)")
    return parser


def _load(args, kind: str | None):
    try:
        cfg = load_config(args.config, strict=args.strict, seed_override=getattr(args, "seed", None))
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc}"]) from None
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if kind is not None and cfg.kind != kind:
        raise ConfigError([f"config kind is {cfg.kind!r} but the '{kind}' subcommand was used"])
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = _load(args, None)
            print(f"ok: {cfg.kind} '{cfg.name}' (digest {cfg.digest[:12]})")
            return 0
        if args.command == "plotdata":
            records = [load_record(p) for p in args.results]
            if args.out:
                with open(args.out, "w") as fh:
                    emit_plotdata(records, fh)
            else:
                emit_plotdata(records, sys.stdout)
            return 0
        cfg = _load(args, args.command)
        if args.jobs < 1:
            raise ConfigError([f"--jobs must be >= 1, got {args.jobs}"])
        record = run(cfg, args.out, jobs=args.jobs)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if args.command == "plotdata" else 3
    print(f"{record.kind} '{record.name}': {record.n_pass} PASS, {record.n_fail} FAIL, "
          f"{len(record.rows)} rows in {record.wall_time:.2f}s -> {record.csv_path}")
    return record.exit_code


if __name__ == "__main__":
    sys.exit(main())
