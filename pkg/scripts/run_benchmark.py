#!/usr/bin/env python3
"""Run one full experiment on a synthetic corpus and print the report.

Example:
    python3 scripts/run_benchmark.py --semantic wass --scheme hier --kappa 10 \
        --sparsity 0.6 --seed 0 --out runs/wass_hier
"""

from __future__ import annotations

import argparse
from pathlib import Path

import treeseg.experiment as exp


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--semantic", choices=["wass", "twce"], default="wass")
    ap.add_argument("--scheme", choices=["top", "leaf", "equal", "hier"], default="hier")
    ap.add_argument("--kappa", type=float, default=10.0)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--beta", type=float, default=0.5)
    ap.add_argument("--seg", choices=["ce", "dice_ce", "none"], default="ce")
    ap.add_argument("--sparsity", type=float, default=1.0)
    ap.add_argument("--label-folds", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/benchmark")
    args = ap.parse_args()

    config = exp.config_from_dict(
        {
            "loss": {
                "semantic": args.semantic,
                "scheme": args.scheme,
                "kappa": args.kappa,
                "alpha": args.alpha,
                "beta": args.beta,
                "seg": args.seg,
            },
            "train": {"model": "linear", "lr": args.lr, "epochs": args.epochs},
            "synth": {"sparsity": args.sparsity},
            "n_subject_folds": 2,
            "n_label_folds": args.label_folds,
            "seed": args.seed,
        }
    )
    out = exp.run_experiment(config, Path(args.out), jobs=args.jobs)
    print((out / "report.txt").read_text())
    print(f"full report: {out / 'report.json'}")


if __name__ == "__main__":
    main()
