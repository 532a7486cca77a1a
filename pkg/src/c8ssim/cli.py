"""Command line: run and validate scenarios, dump golden vectors, inspect event logs.

Exit codes: 0 when every assertion holds, 1 when one fails, 2 for bad input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import vectors
from .sim import config as simconfig
from .sim.config import ConfigInvalid
from .sim.eventlog import LogMalformed, parse_jsonl
from .sim.report import RunReport, filter_events, phase_rows, render_table
from .sim.runner import run_scenario

EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2
SEED_ENV = "C8SSIM_SEED"


def _scenario_help() -> str:
    lines = ["bundled scenarios (pass the name to --config):"]
    for name, path in simconfig.bundled().items():
        try:
            desc = (yaml.safe_load(path.read_text()) or {}).get("description", "")
        except yaml.YAMLError:
            desc = "(unreadable)"
        lines.append(f"  {name:<26} {' '.join(str(desc).split())}")
    return "\n".join(lines)


def resolve_config(ref: str) -> Path:
    """A path on disk, or the stem of a bundled scenario."""
    path = Path(ref)
    if path.exists():
        return path
    bundled = simconfig.bundled()
    if ref in bundled:
        return bundled[ref]
    raise ConfigInvalid(f"no such file or bundled scenario: {ref}")


def _seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigInvalid(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return None


def _load(ref: str):
    return simconfig.load(resolve_config(ref))


def cmd_run(args) -> int:
    refs = list(simconfig.bundled()) if args.all else [args.config]
    if not refs or refs == [None]:
        print("error: --config or --all is required", file=sys.stderr)
        return EXIT_INVALID
    try:
        seed = _seed(args)
        cfgs = [_load(r) for r in refs]
    except ConfigInvalid as exc:
        for d in exc.details:
            print(f"config invalid: {d}", file=sys.stderr)
        return EXIT_INVALID
    code = EXIT_OK
    for cfg in cfgs:
        result = run_scenario(cfg, seed)
        text = result.log.to_jsonl()
        report = RunReport.from_records(parse_jsonl(text))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{cfg.name}.jsonl").write_text(text)
            (out / f"{cfg.name}.report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        if args.format == "jsonl":
            sys.stdout.write(text)
        else:
            print(report.render())
        if not report.passed:
            code = EXIT_FAILED
    return code


def cmd_validate(args) -> int:
    try:
        cfg = _load(args.config)
    except ConfigInvalid as exc:
        for d in exc.details:
            print(f"config invalid: {d}", file=sys.stderr)
        return EXIT_INVALID
    print(f"{cfg.name}: ok ({len(cfg.nodes)} nodes, {len(cfg.pods)} pods, {len(cfg.adversary)} adversary actions)")
    return EXIT_OK


def cmd_vectors(args) -> int:
    if args.check:
        problems = vectors.compare(args.check)
        for name in problems:
            print(f"mismatch: {name}", file=sys.stderr)
        if not problems:
            print(f"vectors in {args.check} match")
        return EXIT_FAILED if problems else EXIT_OK
    manifest = vectors.write_vectors(args.out)
    for name, meta in manifest["files"].items():
        print(f"{name:<24} {meta['size']:>6}  {meta['sha256']}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        text = Path(args.log).read_text()
        records = parse_jsonl(text)
    except FileNotFoundError:
        print(f"error: no such file: {args.log}", file=sys.stderr)
        return EXIT_INVALID
    except LogMalformed as exc:
        print(f"malformed log: {exc}", file=sys.stderr)
        return EXIT_INVALID
    events = filter_events(records, args.actor, args.phase, args.kind)
    rows = phase_rows(events)
    if args.format == "jsonl":
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    else:
        print(render_table(rows, events if args.events else None))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="c8ssim",
        description="Confidential cluster simulator.",
        epilog=_scenario_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and judge it", epilog=_scenario_help(),
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("--config", help="scenario YAML path or bundled scenario name")
    run.add_argument("--all", action="store_true", help="run every bundled scenario")
    run.add_argument("--seed", type=int, help=f"override the scenario seed (fallback: ${SEED_ENV})")
    run.add_argument("--out", help="directory for <scenario>.jsonl and <scenario>.report.json")
    run.add_argument("--format", choices=("text", "jsonl"), default="text")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a scenario config without running it")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)

    vec = sub.add_parser("vectors", help="write golden wire-format vectors")
    vec.add_argument("--out", default="golden")
    vec.add_argument("--check", metavar="DIR", help="compare a fresh build against vectors in DIR")
    vec.set_defaults(func=cmd_vectors)

    ins = sub.add_parser("inspect", help="summarise an event log by lifecycle phase")
    ins.add_argument("log")
    ins.add_argument("--actor")
    ins.add_argument("--phase")
    ins.add_argument("--kind")
    ins.add_argument("--events", action="store_true", help="also list the matching events")
    ins.add_argument("--format", choices=("text", "jsonl"), default="text")
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
