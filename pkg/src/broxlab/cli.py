"""Command-line entry point for experiments and standalone analysis tools.

Exit codes: 0 pass/completion, 1 any failing statistical check, 2 config
error, 3 budget truncation above the configured cap.  Reports are written
atomically (temp file + rename), so interrupted runs never leave half-written
JSON behind.
"""

from __future__ import annotations

import argparse
import json
import sys

from .environment import Environment, valley_sequence
from .errors import BroxlabError
from .experiments import EXPERIMENTS, run_experiment, validate_config
from .laws import j0_constant
from .paths import read_csv

EXIT_PASS = 0
EXIT_TEST_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_TRUNCATION = 3

_EXPERIMENT_COMMANDS = sorted(set(EXPERIMENTS) - {"valley-depth"}) + ["valley-depth"]


def _parse_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, _, val = item.partition("=")
        out[key.strip()] = json.loads(val) if val and val[0] in "[{0123456789-.tfn\"" else val
    return out


def _load_config(args, experiment):
    raw = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            return None, [f"config file not found: {args.config}"]
        except json.JSONDecodeError as exc:
            return None, [f"config file is not valid JSON: {exc}"]
        if not isinstance(raw, dict):
            return None, ["config must be a JSON object"]
    try:
        raw.update(_parse_overrides(args.set))
    except (ValueError, json.JSONDecodeError) as exc:
        return None, [str(exc)]
    raw["experiment"] = experiment
    if args.seed is not None:
        raw["base_seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    if args.out is not None:
        raw["out_dir"] = args.out
    return validate_config(raw)


def _run_experiment_command(args, experiment) -> int:
    cfg, errors = _load_config(args, experiment)
    if errors:
        for e in errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    report = run_experiment(cfg)
    if cfg.out_dir:
        path = report.save(cfg.out_dir)
        print(f"report written to {path}")
    summary = {
        "experiment": cfg.experiment,
        "passed": report.passed,
        "truncation_rate": report.truncation_rate,
        "wall_time_s": round(report.wall_time_s, 3),
    }
    print(json.dumps(summary, sort_keys=True))
    for t in report.test_results:
        status = "pass" if t["pass"] else "FAIL"
        print(f"  [{status}] {t['law_tag']}: stat={t['statistic']:.6g} thr={t['threshold']:.6g} n={t['n']}")
    for name, val in report.checks.items():
        print(f"  [{'pass' if val else 'FAIL'}] {name}")
    if not report.passed:
        return EXIT_TEST_FAILURE
    if report.truncation_rate > cfg.truncation_cap:
        return EXIT_TRUNCATION
    return EXIT_PASS


def _run_valley_command(args) -> int:
    try:
        path = read_csv(args.path)
        env = Environment.from_paths(path)
        pairs, truncated = valley_sequence(env, "right", args.threshold, args.count)
    except (BroxlabError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    out = {
        "threshold": args.threshold,
        "pairs": [{"rise": b, "bottom": m} for b, m in pairs],
        "truncated": truncated,
    }
    print(json.dumps(out, sort_keys=True))
    return EXIT_PASS if not truncated else EXIT_TRUNCATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="broxlab",
        description="Simulation and verification lab for diffusion in a Brownian environment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in _EXPERIMENT_COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--out", help="output directory for reports")
        p.add_argument("--workers", type=int, help="replicate worker pool size")
        p.add_argument("--seed", type=int, help="base seed")

    pv = sub.add_parser("valley", help="decompose a path CSV into (rise, bottom) pairs")
    pv.add_argument("--path", required=True, help="CSV with header position,value")
    pv.add_argument("--threshold", type=float, required=True, help="oscillation depth threshold")
    pv.add_argument("--count", type=int, default=3, help="number of pairs to find")

    sub.add_parser("j0", help="print the smallest positive root of the Bessel function J0")
    return parser


def parse_and_dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "j0":
        print(f"{j0_constant():.15f}")
        return EXIT_PASS
    if args.command == "valley":
        return _run_valley_command(args)
    try:
        return _run_experiment_command(args, args.command)
    except BroxlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
