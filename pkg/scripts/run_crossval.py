#!/usr/bin/env python3
"""Patient-wise cross-validation on a volumetric manifest.

For every fold: train on the fold's reference/query split, segment the
held-out subjects and report per-subject Dice.

    python3 scripts/run_crossval.py manifest.csv --out cv/ --polarity bright --stage1-cycles 2 --stage2-cycles 1
"""

import argparse
import json
import logging
from pathlib import Path

from ascnet.data import balance_sets, load_manifest, split_crossval
from ascnet.evaluate import evaluate_dataset
from ascnet.experiment import reconstruct
from ascnet.model import NetworkSpec
from ascnet.segment import segment_dataset
from ascnet.trainer import TrainingSchedule, run_training


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, nargs=2, default=[240, 240])
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--polarity", choices=("bright", "dark"), default="bright")
    p.add_argument("--threshold", default="auto", help="'auto' or a level 0..255")
    p.add_argument("--post-process", action="store_true")
    p.add_argument("--stage1-cycles", type=int, default=2)
    p.add_argument("--stage2-cycles", type=int, default=1)
    p.add_argument("--epochs-d", type=int, default=1)
    p.add_argument("--epochs-m", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    size = tuple(args.size)
    corpus = load_manifest(args.manifest, size)
    spec = NetworkSpec(input_size=size)
    schedule = TrainingSchedule(
        args.stage1_cycles, args.stage2_cycles, args.epochs_d, args.epochs_m, seed=args.seed
    )
    level = args.threshold if args.threshold == "auto" else int(args.threshold)
    summary = []
    for k, fold in enumerate(split_crossval(corpus, args.folds, seed=args.seed)):
        ref, query = balance_sets(fold.train_reference, fold.train_query, args.seed)
        state = run_training(schedule, ref, query, spec, out_dir=args.out / f"fold{k}")
        held = fold.held_out
        recon = reconstruct(state.main, held.stack())
        results = segment_dataset(recon, args.polarity, level, held.regions, args.post_process)
        report = evaluate_dataset(results, held.masks, held.names, grouping="subject", fold_id=k)
        report.write_csv(args.out / f"fold{k}" / "eval.csv")
        print(f"fold {k}: {report.summary()} at level {results[0].threshold_level}")
        summary.append({"fold": k, "mean_dice": report.mean_dice, "level": results[0].threshold_level})
    (args.out / "crossval.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
