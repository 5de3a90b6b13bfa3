"""Command-line entry point: ``gmsbayes <subcommand> --config FILE [--seed N] [--out DIR]``.

Exit status is 0 on success, 2 for configuration errors and 3 for numerical
failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from . import experiments as ex
from .config import ExperimentConfig, load_config, save_config
from .diagnostics import count_decreases
from .errors import ConfigError, NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("gmsbayes")


def _prepare(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.validate()
    os.makedirs(args.out, exist_ok=True)
    save_config(os.path.join(args.out, "config.yaml"), cfg)
    return cfg


def cmd_gen_data(cfg: ExperimentConfig, args) -> dict:
    data = ex.generate_data(cfg, args.out)
    return {"n_d": int(data.d.size), "noise_to_signal": data.noise_to_signal()}


def cmd_build_basis(cfg: ExperimentConfig, args) -> dict:
    p = ex.setup_problem(cfg)
    basis = ex.multiscale_basis(p, cache_dir=args.out)
    return {"n_coarse_dofs": int(basis.R.shape[1]), "n_fine_dofs": int(basis.R.shape[0])}


def cmd_fit_surrogate(cfg: ExperimentConfig, args) -> dict:
    s = ex.build_and_save_surrogate(cfg, args.out)
    return {"n_terms": int(s.index_set.size), "n_outputs": int(s.n_d)}


def cmd_invert(cfg: ExperimentConfig, args) -> dict:
    res = ex.run_experiment(cfg, out=args.out, kl=not args.no_kl)
    return res.metrics


def cmd_diagnose(cfg: ExperimentConfig, args) -> dict:
    return ex.diagnose(cfg, args.out)


def cmd_sweep(cfg: ExperimentConfig, args) -> dict:
    rows = ex.convergence_sweep(cfg, args.variable, args.values, out=args.out)
    kl = [r.d_kl for r in rows]
    return {"values": [r.sweep_value for r in rows], "d_kl": kl, "e_l2": [r.e_l2 for r in rows],
            "kl_decreases": count_decreases(kl)}


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate synthetic observations with the full-order model"),
    "build-basis": (cmd_build_basis, "build and cache the multiscale basis"),
    "fit-surrogate": (cmd_fit_surrogate, "fit the chaos surrogate of the reduced source response"),
    "invert": (cmd_invert, "offline reduction plus posterior sampling"),
    "diagnose": (cmd_diagnose, "KL and model error of a finished inversion"),
    "sweep": (cmd_sweep, "diagnostics over basis size M or chaos degree N"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmsbayes", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="YAML experiment file")
        sp.add_argument("--seed", type=int, default=None, help="master seed overriding every stream")
        sp.add_argument("--out", default="out", help="output directory")
        if name == "invert":
            sp.add_argument("--no-kl", action="store_true", help="skip the full-model KL estimate")
        if name == "sweep":
            sp.add_argument("--variable", choices=("M", "N"), required=True)
            sp.add_argument("--values", type=int, nargs="+", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: seed must be nonnegative", file=sys.stderr)
        return EXIT_CONFIG
    fn = COMMANDS[args.command][0]
    try:
        cfg = _prepare(args)
        result = fn(cfg, args)
    except ConfigError as exc:
        print(f"config error [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
