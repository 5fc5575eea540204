#!/usr/bin/env python3
"""Run the desk-scale semi-supervised benefit experiment.

Trains the full objective, the no-contrastive ablation and the
labels-only baseline over a seed set on one shared procedural dataset,
then prints the summary (also written to <out>/summary.json).

    python3 scripts/run_benefit_experiment.py --out runs/benefit
"""

import argparse
import json

from stainssl.experiment import VARIANTS, run_benefit_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=None, help="directory for per-run artifacts")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--dataset-seed", type=int, default=101)
    parser.add_argument("--epochs", type=int, default=18)
    parser.add_argument("--iterations", type=int, default=40)
    parser.add_argument(
        "--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS)
    )
    args = parser.parse_args()
    summary = run_benefit_experiment(
        seeds=tuple(args.seeds),
        dataset_seed=args.dataset_seed,
        out_dir=args.out,
        variants=tuple(args.variants),
        epochs=args.epochs,
        iterations=args.iterations,
    )
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
