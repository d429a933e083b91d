"""Command-line entry point: ``stpf {simulate,run,aggregate,validate}``."""

import argparse
import json
import logging
import os
import sys

from stpf.harness import ALGORITHMS, PRESETS, ExperimentConfig, aggregate, preset, run_experiment, write_columns
from stpf.models import make_model, read_data_csv, simulate_data, write_data_csv
from stpf.validation import validation_suite, write_checks


def _load_config(args):
    if args.config and args.preset:
        raise ValueError("give either --config or --preset, not both")
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = ExperimentConfig.loads(fh.read())
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    # flags override file values
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "runs", None) is not None:
        cfg.runs = args.runs
    if getattr(args, "algo", None):
        cfg.algorithms = list(args.algo)
    return cfg.validate()


def cmd_simulate(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.data_seed = args.seed
    model = make_model(cfg.model, **cfg.model_params)
    states, obs = simulate_data(model, cfg.n, cfg.data_seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    for kind, rows in (("states", states), ("obs", obs)):
        path = os.path.join(cfg.out_dir, f"{cfg.name}_{kind}.csv")
        write_data_csv(path, rows, model, cfg.data_seed, kind=kind)
        print(path)


def cmd_run(args):
    cfg = _load_config(args)
    data = None
    if args.data:
        data, _ = read_data_csv(args.data)
    out = run_experiment(cfg, data=data)
    for label, path in sorted(out["aggregates"].items()):
        print(f"{label}: {path}")
    print(out["timing"])


def cmd_aggregate(args):
    if not args.out:
        raise ValueError("aggregate needs --out PATH")
    write_columns(args.out, aggregate(args.files))
    print(args.out)


def cmd_validate(args):
    checks = validation_suite(quick=args.quick, seed=args.seed or 0)
    for c in checks:
        print(c.line())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_checks(os.path.join(args.out, "validation.csv"), checks)
    return 0 if all(c.passed for c in checks) else 1


def _common(p, out_help="output directory"):
    p.add_argument("--config", metavar="PATH", help="experiment config (JSON)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--out", metavar="DIR", help=out_help)


def build_parser():
    parser = argparse.ArgumentParser(prog="stpf", description="Space-time particle filter experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one dataset")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run replicated filters and aggregate")
    _common(p)
    p.add_argument("--algo", action="append", choices=ALGORITHMS, help="repeatable; overrides the config list")
    p.add_argument("--runs", type=int, metavar="R")
    p.add_argument("--data", metavar="PATH", help="observation CSV instead of simulating")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("aggregate", help="aggregate per-run trace CSVs")
    p.add_argument("files", nargs="+")
    p.add_argument("--out", metavar="PATH", help="aggregate CSV to write")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("validate", help="run the oracle validation suites")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--quick", action="store_true", help="tenfold fewer replications")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except (ValueError, OSError, ArithmeticError, json.JSONDecodeError, TypeError) as exc:
        print(f"stpf: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
