"""
Desk-scale acceptance experiments for FADE.

Runs configs/desk.ini and its variants over three seeds and writes the
medians and verdicts to output/evaluation_desk.json.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from fade_sim.analysis import loss_decrease_report, records_frame  # noqa: E402
from fade_sim.config import load_config  # noqa: E402
from fade_sim.engine import load_datasets, run  # noqa: E402
from fade_sim.utils import setup_logging  # noqa: E402

CONFIG_PATH = os.path.join(os.path.dirname(__file__), "..", "configs", "desk.ini")
OUTPUT_DIR = os.path.join(os.path.dirname(__file__), "..", "output")

# name -> overrides applied to the desk config
VARIANTS = {
    "fade_100_at": {},
    "standard": {"train.adversarial_fraction": 0.0},
    "fade_20_at": {"train.adversarial_fraction": 0.2},
    "lambda_1e-4": {"train.aux_weight_decay": 1e-4},
    "lambda_1e-2": {"train.aux_weight_decay": 1e-2},
}

logger = logging.getLogger("fade_sim.evaluation")


def final_row(records):
    frame = records_frame(records)
    last = frame[frame["round"] == frame["round"].max()]
    first = last[last["module"].str.endswith("/1")]
    return {
        "nat_acc": float(last["nat_acc"].iloc[0]),
        "adv_acc": float(last["adv_acc"].iloc[0]),
        "feat_pert_mean": float(first["feat_pert_mean"].iloc[0]) if len(first) else float("nan"),
    }


def run_variant(base, name, overrides, seeds, output_dir):
    rows, loss_checks = [], []
    for seed in seeds:
        config = base.with_override("experiment.seed", seed)
        for key, value in overrides.items():
            config = config.with_override(key, value)
        start = time.time()
        result = run(config, output_dir=os.path.join(output_dir, name, f"seed{seed}"),
                     datasets=load_datasets(config))
        row = dict(final_row(result.records), seed=seed, runtime_sec=time.time() - start)
        rows.append(row)
        logger.info(f"{name} seed={seed}: {row}")
        if not overrides:
            report = loss_decrease_report(result.records, start=config.train.warmup_rounds,
                                          end=config.experiment.rounds)
            loss_checks.append({"seed": seed, "modules": report.to_dict("records")})
    summary = {key: float(np.median([r[key] for r in rows])) for key in ("nat_acc", "adv_acc", "feat_pert_mean")}
    return {"runs": rows, "median": summary, "loss_decrease": loss_checks}


def main():
    parser = argparse.ArgumentParser(description="Desk-scale FADE acceptance experiments")
    parser.add_argument("--seeds", default="0,1,2", help="Comma-separated master seeds")
    parser.add_argument("--output-dir", default=OUTPUT_DIR)
    args = parser.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    os.makedirs(args.output_dir, exist_ok=True)
    setup_logging("INFO", os.path.join(args.output_dir, "evaluation.log"))
    base = load_config(CONFIG_PATH)

    total_start = time.time()
    results = {name: run_variant(base, name, overrides, seeds, os.path.join(args.output_dir, "runs"))
               for name, overrides in VARIANTS.items()}
    median = {name: r["median"] for name, r in results.items()}

    verdicts = {
        "fade_beats_standard_by_10pt": median["fade_100_at"]["adv_acc"] - median["standard"]["adv_acc"] >= 0.10,
        "partial_at_below_full_by_5pt": median["fade_100_at"]["adv_acc"] - median["fade_20_at"]["adv_acc"] >= 0.05,
        "larger_lambda_larger_feature_perturbation":
            median["lambda_1e-2"]["feat_pert_mean"] > median["lambda_1e-4"]["feat_pert_mean"],
        "every_module_loss_decreased": all(
            m["decreased"] for check in results["fade_100_at"]["loss_decrease"] for m in check["modules"]),
    }
    summary = {
        "seeds": seeds,
        "medians": median,
        "verdicts": verdicts,
        "total_time_sec": time.time() - total_start,
    }

    with open(os.path.join(args.output_dir, "evaluation_desk.json"), "w", encoding="utf-8") as f:
        json.dump({"summary": summary, "variants": results}, f, indent=2, default=float)

    print("Medians:", json.dumps(median, indent=2))
    print("Verdicts:", json.dumps(verdicts, indent=2))


if __name__ == "__main__":
    main()
