"""Command line entry point: ``psfkit <verb> --config cfg.json --out dir [--seed N]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
import argparse
import logging
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig, advdiff_defaults
from .experiments import EXPERIMENTS, NumericalFailure
from .spdfix import EigensolverError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
log = logging.getLogger("psfkit")


def build_parser():
    p = argparse.ArgumentParser(prog="psfkit", description="PSF operator approximation experiments")
    p.add_argument("verb", choices=sorted(EXPERIMENTS))
    p.add_argument("--config", help="JSON config path; defaults are used when omitted")
    p.add_argument("--out", help="output directory (overrides config.output)")
    p.add_argument("--seed", type=int, help="overrides config solver.seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(verb, path):
    if path is None:
        return advdiff_defaults() if verb == "precond-study" else ExperimentConfig()
    try:
        return ExperimentConfig.load(path)
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from exc


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.verb, args.config)
        if args.seed is not None:
            cfg.solver.seed = args.seed
        if args.out is not None:
            cfg.output = args.out
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rows = EXPERIMENTS[args.verb](cfg, cfg.output)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, EigensolverError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    log.info("%s: %d rows written to %s", args.verb, len(rows), cfg.output)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
