"""Run every experiment with default configs into one output tree.

    python3 scripts/run_all.py [--out results] [--only blur-convergence apply-compare]
"""
import argparse
import os
import sys

from psfkit.cli import main as cli_main
from psfkit.experiments import EXPERIMENTS


def run(verbs, out):
    codes = {}
    for verb in verbs:
        codes[verb] = cli_main([verb, "--out", os.path.join(out, verb), "-v"])
        print(f"{verb}: exit {codes[verb]}")
    return max(codes.values(), default=0)


if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results")
    p.add_argument("--only", nargs="*", choices=sorted(EXPERIMENTS))
    args = p.parse_args()
    sys.exit(run(args.only or sorted(EXPERIMENTS), args.out))
