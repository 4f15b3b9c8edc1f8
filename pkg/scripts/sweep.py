"""Sensitivity of the adaptive student to the distillation weight, K and the margin definition.

Teachers are trained once per seed and shared by every grid point.

    python3 scripts/sweep.py --lam 0.1 0.5 0.9 --top-k 1 3 5 --seeds 0 --out runs/sweep
"""

import argparse
import csv
import dataclasses
import itertools
import logging
from pathlib import Path

from amtss.config import desk_config
from amtss.data import generate_corpus
from amtss.experiments import run_amtss, train_teachers
from amtss.scheduler import MARGIN_MODES


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--lam", type=float, nargs="+", default=[0.1, 0.5, 0.9])
    parser.add_argument("--top-k", type=int, nargs="+", default=[1, 3, 5])
    parser.add_argument("--margin-mode", nargs="+", choices=MARGIN_MODES, default=["raw_delta"])
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--out", default="runs/sweep")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for seed in args.seeds:
        base = desk_config(seed, args.epochs)
        corpus = generate_corpus(base.corpus)
        teachers = train_teachers(corpus, base)
        for lam, k, mode in itertools.product(args.lam, args.top_k, args.margin_mode):
            cfg = dataclasses.replace(
                base, distill=dataclasses.replace(base.distill, lam=lam),
                adaptive=dataclasses.replace(base.adaptive, top_k=k, margin_mode=mode)).validate()
            result = run_amtss(corpus, cfg, teachers=teachers)
            row = {"seed": seed, "lam": lam, "top_k": k, "margin_mode": mode,
                   "average": f"{100 * result.average:.2f}", "epochs": result.extra["epochs"]}
            rows.append(row)
            print("  ".join(f"{key}={value}" for key, value in row.items()), flush=True)

    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
