"""Command line interface.

Subcommands::

    suda run <suite-file> [--out DIR] [--jobs N] [--no-figures]
    suda spectral-report <topology> <method> [--no-psd-shift]
    suda compare <spec-file>

Exit codes: 0 success, 1 run or assertion failure, 2 configuration error.
The default output directory comes from $SUDA_OUT (falling back to ./out).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, InvalidParameterError
from .suite import compare, execute_suite, load_suite, spectral_report

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="suda",
                                     description="decentralized stochastic optimization simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a suite file")
    p_run.add_argument("suite", help="path to a .suite JSON file")
    p_run.add_argument("--out", default=None, help="output directory (default $SUDA_OUT/<name>)")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel workers")
    p_run.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p_spec = sub.add_parser("spectral-report", help="print spectral constants as JSON")
    p_spec.add_argument("topology", help="topology spec, e.g. ring:32 or er:32:0.8:1")
    p_spec.add_argument("method", help="method name, e.g. ed_d2, atc_gt, dsgd")
    p_spec.add_argument("--no-psd-shift", action="store_true",
                        help="fail instead of lazy-shifting a non-PSD matrix")

    p_cmp = sub.add_parser("compare", help="evaluate a compare spec against summaries")
    p_cmp.add_argument("spec", help="path to a compare spec JSON file")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "spectral-report":
            return _cmd_spectral(args)
        return _cmd_compare(args)
    except (ConfigError, InvalidParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _default_out(name: str) -> Path:
    return Path(os.environ.get("SUDA_OUT", "out")) / name


def _cmd_run(args) -> int:
    suite = load_suite(args.suite)
    out = Path(args.out) if args.out else _default_out(suite.name)
    summary, failures = execute_suite(suite, out, jobs=args.jobs,
                                      figures=not args.no_figures)
    print(f"suite '{suite.name}': {len(summary['runs'])} configs x "
          f"{len(suite.seeds)} seeds -> {out}")
    for label, entry in summary["runs"].items():
        plat = entry["plateau"].get("grad_norm_avg_sq",
                                    entry["plateau"].get("subopt_avg", float("nan")))
        print(f"  {label:24s} lambda={entry['lambda']:.4f} plateau={plat:.4e}")
    for msg in failures:
        print(f"  FAILED {msg}", file=sys.stderr)
    return EXIT_RUN_FAILURE if failures else EXIT_OK


def _cmd_spectral(args) -> int:
    report = spectral_report(args.topology, args.method,
                             psd_shift=not args.no_psd_shift)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_compare(args) -> int:
    spec_path = Path(args.spec)
    try:
        spec = json.loads(spec_path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"compare spec not found: {spec_path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{spec_path}:{exc.lineno}: {exc.msg}") from exc
    report = compare(spec, base_dir=spec_path.parent)
    for item in report["assertions"]:
        mark = "PASS" if item["passed"] else "FAIL"
        print(f"{mark}  {json.dumps(item['assertion'])}  ({item['detail']})")
    print("result:", "PASS" if report["passed"] else "FAIL")
    return EXIT_OK if report["passed"] else EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
