"""Command line: ``follmer-lab run|run-all|list``.

Exit codes: 0 when every row passes, 1 when some row fails or an
experiment errors, 2 for usage and configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from typing import Dict, List, Optional

from .harness import CONFIG_KEYS, REGISTRY, ConfigError, make_config, parse_values, read_config_file, run_all, run_experiment

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="key = value file; flags override it")
    for key in CONFIG_KEYS:
        if key == "experiment_name":
            continue
        flags = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
        p.add_argument(*flags, dest=key, metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="follmer-lab", description="Monte Carlo and quadrature checks for strict local martingales.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("experiment", help="registry name (see 'list')")
    _add_config_flags(run)
    run_all_p = sub.add_parser("run-all", help="run every experiment in registry order")
    _add_config_flags(run_all_p)
    sub.add_parser("list", help="print the experiment registry")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    raw = read_config_file(args.config) if args.config else {}
    raw.update({k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None})
    return parse_values(raw)


def _print_rows(rows, out):
    for r in rows:
        oracle = "" if r.oracle is None else f" oracle={r.oracle:.6g}"
        t = "" if r.t is None else f" t={r.t:g}"
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.experiment}: {r.param}{t} estimate={r.estimate:.6g}{oracle}"
              f" tol={r.tolerance:.3g}", file=out)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    out = sys.stdout
    if args.command == "list":
        width = max(map(len, REGISTRY))
        for name, exp in REGISTRY.items():
            print(f"{name:<{width}}  {exp.description}", file=out)
        return EXIT_PASS
    try:
        overrides = _overrides(args)
        if args.command == "run":
            overrides.pop("experiment_name", None)
            cfg = make_config(args.experiment, overrides)
            rows = run_experiment(cfg)
            _print_rows(rows, out)
            return EXIT_PASS if all(r.passed for r in rows) else EXIT_FAIL
        summary = run_all(overrides, out=out)
        return EXIT_PASS if summary.passed else EXIT_FAIL
    except ConfigError as exc:
        print(f"follmer-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
