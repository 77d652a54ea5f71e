"""Command line: ``sectflow <scenario> [--config PATH] [--out DIR] [--workers N] [--seed U64]``.

Exit codes: 0 success, 2 configuration or missing-dependency error,
3 numerical failure, 4 a built-in acceptance check failed.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from .config import SCENARIOS, load_config, validate
from .errors import ConfigurationError, DependencyError, SectflowError, UnsupportedSystemError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("sectflow")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration (defaults if omitted)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [run] out)")
    common.add_argument("--workers", metavar="N", type=_positive, help="worker processes")
    common.add_argument("--seed", metavar="U64", type=_u64, help="master seed")
    common.add_argument("--print-config", action="store_true",
                        help="print the effective configuration as INI and exit")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="sectflow", description="Sectional-hyperbolic flow experiments.")
    sub = p.add_subparsers(dest="scenario", required=True, metavar="SCENARIO")
    for name in SCENARIOS:
        sub.add_parser(name, parents=[common], help=f"run the {name} scenario")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        run = replace(cfg.run, scenario=args.scenario)
        if args.out:
            run = replace(run, out=args.out)
        if args.workers:
            run = replace(run, workers=args.workers)
        if args.seed is not None:
            run = replace(run, seed=args.seed)
        cfg.run = run
        validate(cfg)
        if args.print_config:
            print(cfg.to_ini(), end="")
            return EXIT_OK
        from .scenarios import run_scenario
        with np.errstate(over="ignore", invalid="ignore"):
            out, paths, cache = run_scenario(cfg, args.scenario)
    except (ConfigurationError, DependencyError, UnsupportedSystemError) as e:
        print(f"sectflow {args.scenario}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SectflowError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"sectflow {args.scenario}: numerical failure: {e.__class__.__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("cache: %d hits, %d misses, %d evictions", cache.hits, cache.misses, cache.evictions)
    for p in paths:
        print(f"wrote {p}")
    failed = [k for k, v in out.checks.items() if not v]
    for k, v in out.checks.items():
        print(f"check {k}: {'PASS' if v else 'FAIL'}")
    return EXIT_CHECK if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
