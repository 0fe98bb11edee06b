# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Command-line interface for the FADE simulator.

Subcommands: train, eval, sweep, theory, profile.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 theory-check failure (1 for anything else).
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

import pandas as pd
from tabulate import tabulate

from .adversary import AttackConfig
from .analysis import METRIC_COLUMNS, evaluate, export_plot_data, feature_perturbation, records_frame
from .config import ExperimentConfig, RuntimeSettings, load_config
from .engine import build_model, load_datasets, run
from .exceptions import ConfigError, FadeError
from .model import load_checkpoint, profile_table
from .theory import SUITES, run_suites
from .utils import setup_logging

logger = logging.getLogger("fade_sim.cli")

RULE = "=" * 80


def _banner(title: str) -> None:
    print("\n" + RULE)
    print(title)
    print(RULE + "\n")


def _output_dir(config: ExperimentConfig, settings: RuntimeSettings, flag: Optional[str]) -> str:
    return flag or settings.output_dir or config.output_dir


def _with_seed(config: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    return config.with_override("experiment.seed", seed) if seed is not None else config


def cmd_train(args, settings: RuntimeSettings) -> int:
    config = _with_seed(load_config(args.config), args.seed)
    output_dir = _output_dir(config, settings, args.output_dir)
    os.makedirs(output_dir, exist_ok=True)
    setup_logging(settings.log_level, os.path.join(output_dir, settings.log_file))
    logger.info(f"Training {args.config} -> {output_dir}")

    _banner("FADE - TRAINING")
    result = run(config, output_dir=output_dir, progress=args.progress)
    metrics_path = os.path.join(output_dir, "metrics.csv")
    if args.plot_data:
        export_plot_data(metrics_path, os.path.join(output_dir, "plot_data.csv"))

    nat, adv = result.final_accuracy
    print(tabulate([["rounds", config.experiment.rounds], ["natural accuracy", nat],
                    ["adversarial accuracy", adv], ["metrics", metrics_path]],
                   tablefmt="simple", floatfmt=".4f"))
    print(f"\n[OK] Final checkpoint: {os.path.join(output_dir, 'final.fade')}")
    return 0


def _eval_attack(config: ExperimentConfig, args) -> AttackConfig:
    update = {key: getattr(args, key) for key in ("norm", "epsilon", "alpha", "steps")
              if getattr(args, key) is not None}
    if not update:
        return config.eval_attack
    try:
        return AttackConfig(**dict(config.eval_attack.model_dump(), **update))
    except ValueError as e:
        raise ConfigError(f"invalid attack flags: {e}") from None


def cmd_eval(args, settings: RuntimeSettings) -> int:
    setup_logging(settings.log_level)
    config = load_config(args.config)
    attack = _eval_attack(config, args)
    _, test = load_datasets(config)
    test = test.head(args.samples or config.experiment.eval_samples)
    template = build_model(config, test.input_shape)
    model = load_checkpoint(args.checkpoint, template)
    logger.info(f"Evaluating {args.checkpoint} on {len(test)} samples with {attack.describe()}")

    nat, adv = evaluate(model, test, attack)
    row = {"nat_acc": nat, "adv_acc": adv}
    if any(ref.count >= 2 for ref in model.module_refs()):
        row.update(feature_perturbation(model, test, attack).summary())
    print(pd.DataFrame([row]).to_csv(index=False, float_format="%.6f"), end="")
    return 0


def cmd_sweep(args, settings: RuntimeSettings) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    base = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.experiment.seed]
    # Validate every value before any compute
    configs = [(value, seed, base.with_override(args.key, value).with_override("experiment.seed", seed))
               for value in values for seed in seeds]
    root = _output_dir(base, settings, args.output_dir)
    os.makedirs(root, exist_ok=True)
    setup_logging(settings.log_level, os.path.join(root, settings.log_file))

    _banner(f"FADE - SWEEP {args.key} over {values}")
    rows = []
    for value, seed, config in configs:
        run_dir = os.path.join(root, f"{args.key}={value}", f"seed{seed}")
        logger.info(f"Sweep run {args.key}={value} seed={seed} -> {run_dir}")
        result = run(config, output_dir=run_dir, progress=args.progress)
        frame = records_frame(result.records)
        final = frame[frame["round"] == frame["round"].max()] if not frame.empty else frame
        for row in final.to_dict("records"):
            rows.append(dict({"key": args.key, "value": value, "seed": seed}, **row))
        print(f"[OK] {args.key}={value} seed={seed}: nat={result.final_accuracy[0]:.4f} "
              f"adv={result.final_accuracy[1]:.4f}")
    sweep = pd.DataFrame(rows, columns=["key", "value", "seed"] + METRIC_COLUMNS)
    path = os.path.join(root, "sweep.csv")
    sweep.to_csv(path, index=False, float_format="%.8g", na_rep="")
    print(f"\n[OK] Sweep table: {path}")
    return 0


def cmd_theory(args, settings: RuntimeSettings) -> int:
    setup_logging(settings.log_level)
    results = run_suites(seed=args.seed, suites=args.suite, instances=args.instances,
                         inject_violation=args.inject_violation)
    _banner("FADE - THEORY CHECKS")
    summary = {}
    for r in results:
        counts = summary.setdefault(r.suite, {"pass": 0, "fail": 0, "violation": 0})
        counts[r.status] += 1
    print(tabulate([[suite, c["pass"], c["fail"], c["violation"]] for suite, c in summary.items()],
                   headers=["suite", "pass", "fail", "violation"]))
    failed = [r for r in results if r.failed]
    flagged = [r for r in results if r.status != "pass"]
    if flagged:
        print()
        print(tabulate([[r.suite, r.instance, r.status, r.detail] for r in flagged],
                       headers=["suite", "instance", "status", "detail"]))
    if failed:
        print(f"\n{len(failed)} check(s) failed")
        return 5
    print("\n[OK] All checks passed")
    return 0


def cmd_profile(args, settings: RuntimeSettings) -> int:
    setup_logging(settings.log_level)
    config = load_config(args.config)
    if config.data.source == "synthetic":
        shape = config.data.input_shape
    else:
        shape = load_datasets(config)[0].input_shape
    spec = config.backbone_spec(tuple(shape))
    table = profile_table(spec, config.partition_specs())
    _banner(f"FADE - MODULE PROFILE ({spec.name}, input {tuple(shape)})")
    print(tabulate(table, headers="keys", showindex=False, floatfmt=".3f"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fade_sim",
        description="FADE - federated adversarial decoupled learning simulator",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m fade_sim train configs/smoke.ini
  python -m fade_sim eval --config configs/smoke.ini --checkpoint runs/smoke/final.fade --epsilon 0
  python -m fade_sim sweep configs/desk.ini --key train.aux_weight_decay --values 0.0001,0.01 --seeds 0,1,2
  python -m fade_sim theory --seed 3 --log-level DEBUG
  python -m fade_sim profile configs/fmnist.ini
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", type=str.upper,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level (default: INFO)")

    train = subparsers.add_parser("train", parents=[common], help="Run a federated training experiment")
    train.add_argument("config", help="Experiment config file")
    train.add_argument("--seed", type=int, help="Override the master seed")
    train.add_argument("--output-dir", help="Output directory (default: config or FADE_OUTPUT_DIR)")
    train.add_argument("--plot-data", action="store_true", help="Also write plot_data.csv")
    train.add_argument("--progress", action="store_true", help="Show a progress bar")

    ev = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    ev.add_argument("--config", required=True, help="Experiment config declaring data and partition")
    ev.add_argument("--checkpoint", required=True, help="Checkpoint file")
    ev.add_argument("--norm", choices=["linf", "l2"], help="Attack norm")
    ev.add_argument("--epsilon", type=float, help="Attack budget")
    ev.add_argument("--alpha", type=float, help="Attack step size")
    ev.add_argument("--steps", type=int, help="Attack iterations")
    ev.add_argument("--samples", type=int, help="Number of test samples")

    sweep = subparsers.add_parser("sweep", parents=[common], help="Repeat an experiment over values of one scalar key")
    sweep.add_argument("config", help="Experiment config file")
    sweep.add_argument("--key", required=True, help="section.key, e.g. train.aux_weight_decay")
    sweep.add_argument("--values", required=True, help="Comma-separated values")
    sweep.add_argument("--seeds", help="Comma-separated master seeds (default: config seed)")
    sweep.add_argument("--output-dir", help="Root output directory")
    sweep.add_argument("--progress", action="store_true", help="Show progress bars")

    theory = subparsers.add_parser("theory", parents=[common], help="Run the built-in diagnostic oracles")
    theory.add_argument("--seed", type=int, default=0, help="Instance sampling seed")
    theory.add_argument("--instances", type=int, default=100, help="Random instances per suite")
    theory.add_argument("--suite", action="append", choices=list(SUITES), help="Suite to run (repeatable)")
    theory.add_argument("--inject-violation", action="store_true", help="Add a mu <= 0 instance")

    prof = subparsers.add_parser("profile", parents=[common], help="Per-module parameter and MAC counts")
    prof.add_argument("config", help="Experiment config file")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "theory": cmd_theory, "profile": cmd_profile}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 1
    settings = RuntimeSettings(log_level=args.log_level)
    try:
        return COMMANDS[args.command](args, settings)
    except FadeError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\ninterrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
