"""Command-line entry point.

Every subcommand runs one pipeline stage (``pipeline`` runs them all) over a
run directory. Settings come from RunConfig defaults, then an optional
``--config`` file, then command-line flags, later sources winning.

Config file schema: one ``key = value`` per line, keys are RunConfig field
names (``-`` and ``_`` interchangeable), ``#`` starts a comment, booleans are
true/false/1/0/yes/no.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path

from .errors import (CacheCompatibilityError, ConfigurationError, DependencyError, FormatError,
                     InputError, NumericalError, ParameterError, ShapeError, StaleArtifactError,
                     StateError)
from .pipeline import DEFAULT_STAGES, STAGES, RunConfig, run_pipeline

EXPECTED_ERRORS = (CacheCompatibilityError, ConfigurationError, DependencyError, FormatError,
                   InputError, NumericalError, ParameterError, ShapeError, StaleArtifactError,
                   StateError, OSError)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _field_type(f) -> type:
    default = f.default if f.default is not MISSING else None
    if isinstance(default, bool):
        return bool
    if isinstance(default, Path):
        return Path
    return type(default)


def convert(name: str, text: str):
    f = {f.name: f for f in fields(RunConfig)}.get(name)
    if f is None:
        raise ConfigurationError(f"unknown setting {name!r}")
    kind = _field_type(f)
    if kind is bool:
        return parse_bool(text)
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def read_config_file(path: Path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = convert(key, value)
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value settings file")
    common.add_argument("--force", action="store_true", help="rerun even if up to date")
    common.add_argument("--verbose", action="store_true")
    group = common.add_argument_group("settings (RunConfig fields)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _field_type(f)
        if kind is bool:
            group.add_argument(flag, dest=f.name, type=parse_bool, default=None,
                               metavar="BOOL")
        else:
            group.add_argument(flag, dest=f.name, type=str, default=None,
                               metavar=f.name.upper())
    parser = argparse.ArgumentParser(prog="deformer",
                                     description="Decomposed transformer QA toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    p = sub.add_parser("pipeline", parents=[common], help="run several stages in order")
    p.add_argument("--stages", default=",".join(DEFAULT_STAGES),
                   help="comma-separated stage names")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        given = getattr(args, f.name, None)
        if given is not None:
            values[f.name] = given if isinstance(given, bool) else convert(f.name, given)
    return RunConfig(**values)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        stages = (args.stages.split(",") if args.command == "pipeline" else [args.command])
        summaries = run_pipeline(config, [s.strip() for s in stages if s.strip()],
                                 force=args.force)
    except EXPECTED_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for summary in summaries:
        name = summary["stage"]
        if summary["skipped"]:
            print(f"[{name}] up to date, skipped")
            continue
        report = config.run_dir / "reports" / f"{name}.txt"
        print(f"[{name}] done in {summary['seconds']}s")
        if report.exists():
            print(report.read_text().rstrip())
        print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
