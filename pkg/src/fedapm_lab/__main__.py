"""Command-line entry point: ``python -m fedapm_lab --config run.cfg``.

Exit codes: 0 success, 1 at least one run failed (see ``failures.log``),
2 invalid configuration.  The number of client worker threads is read from
the ``FEDAPM_WORKERS`` environment variable; results do not depend on it.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError
from .experiment import apply_overrides, parse_config, run_experiment


def build_parser():
    p = argparse.ArgumentParser(prog="fedapm-lab", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, metavar="PATH", help="key = value config file")
    p.add_argument("--method", help="method name or comma-separated list")
    p.add_argument("--rho", type=float, help="ADMM penalty parameter")
    p.add_argument("--rounds", type=int, help="communication rounds")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--fraction", type=float, help="fraction of clients selected per round")
    p.add_argument("--out", metavar="DIR", help="output directory")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
        cfg = apply_overrides(cfg, method=args.method, rho=args.rho, rounds=args.rounds,
                              seed=args.seed, fraction=args.fraction, out=args.out)
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    result = run_experiment(cfg)
    for path in result.csv_paths:
        print(path)
    print(result.summary_path)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
