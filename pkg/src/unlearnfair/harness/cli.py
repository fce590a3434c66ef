"""Command-line entry point.

    unlearnfair all --config exp.json
    unlearnfair train|unlearn|profile|attack|report --config exp.json
    unlearnfair attack --config exp.json --eta 0 --eta 0.05
    unlearnfair default-config > exp.json

Without ``--config`` the built-in small blob experiment is used. Failures
print one JSON error record to stderr and exit 1; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ConfigError, StageError, UnlearnFairError
from .config import CONFIG_SCHEMA, default_config, load_config, parse_config
from .pipeline import run_experiment, stage_attack, stage_profile, stage_report, stage_train, stage_unlearn


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unlearnfair", description="class-wise unlearning evaluation harness")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def run_cmd(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment config (JSON); default: built-in blob experiment")
        sp.add_argument("--out", help="override the config's output_dir")
        return sp

    run_cmd("train", "train the original model for every seed")
    u = run_cmd("unlearn", "run unlearning methods against saved original models")
    u.add_argument("--method", action="append", help="method name to run (repeatable; default: all)")
    run_cmd("profile", "accuracies and fairness profiles for saved models")
    a = run_cmd("attack", "FGSM robustness for saved models")
    a.add_argument("--eta", action="append", type=float, help="perturbation size (repeatable; default: config etas)")
    run_cmd("report", "assemble report, tables and plot from saved artifacts")
    run_cmd("all", "every stage in order")
    sub.add_parser("default-config", help="print the built-in experiment config")
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def _load(args):
    cfg = load_config(args.config) if args.config else parse_config(default_config())
    if args.out:
        cfg = cfg.with_output_dir(args.out)
    return cfg


def _error(record: dict) -> int:
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "default-config":
        print(json.dumps(default_config(), indent=2, sort_keys=True))
        return 0
    if args.command == "schema":
        print(json.dumps(CONFIG_SCHEMA, indent=2, sort_keys=True))
        return 0
    try:
        cfg = _load(args)
        if args.command == "attack" and args.eta and min(args.eta) < 0:
            raise ConfigError("--eta must be non-negative")
        if args.command == "train":
            stage_train(cfg)
        elif args.command == "unlearn":
            stage_unlearn(cfg, args.method)
        elif args.command == "profile":
            stage_profile(cfg)
        elif args.command == "attack":
            stage_attack(cfg, args.eta)
        elif args.command == "report":
            stage_report(cfg)
        elif args.command == "all":
            run_experiment(cfg)
    except StageError as exc:
        return _error(exc.to_record())
    except UnlearnFairError as exc:
        return _error({"error": type(exc).__name__, "stage": None, "method": None, "seed": None, "message": str(exc)})
    print(json.dumps({"status": "ok", "command": args.command, "output_dir": str(cfg.output_dir)}))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
