"""Run every shipped experiment through the CLI and write one output bundle per config.

Usage: python scripts/run_experiments.py [--out results] [--seed N] [--no-kl] [config ...]
"""

import argparse
import pathlib
import sys

from gmsbayes.cli import EXIT_OK, main as cli

ROOT = pathlib.Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("configs", nargs="*", help="YAML files (default: configs/*.yaml except sweep files)")
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--no-kl", action="store_true")
    args = ap.parse_args()
    paths = [pathlib.Path(c) for c in args.configs] or [
        p for p in sorted((ROOT / "configs").glob("*.yaml")) if not p.stem.startswith("sweep")]
    status = EXIT_OK
    for path in paths:
        cmd = ["invert", "--config", str(path), "--out", str(pathlib.Path(args.out) / path.stem)]
        if args.seed is not None:
            cmd += ["--seed", str(args.seed)]
        if args.no_kl:
            cmd.append("--no-kl")
        print(f"== {path.stem}", flush=True)
        code = cli(cmd)
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(main())
