"""Basis-size and chaos-degree sweeps for the source problem.

Usage: python scripts/run_sweeps.py [--out results/sweeps] [--config configs/sweep_source.yaml]
"""

import argparse
import pathlib
import sys

from gmsbayes.cli import EXIT_OK, main as cli

ROOT = pathlib.Path(__file__).resolve().parents[1]
SWEEPS = {"M": (6, 10, 14, 22), "N": (4, 6, 8, 10)}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "sweep_source.yaml"))
    ap.add_argument("--out", default="results/sweeps")
    args = ap.parse_args()
    status = EXIT_OK
    for variable, values in SWEEPS.items():
        print(f"== sweep over {variable}", flush=True)
        code = cli(["sweep", "--config", args.config, "--out", args.out, "--variable", variable,
                    "--values", *map(str, values)])
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(main())
