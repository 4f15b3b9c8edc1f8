"""Extend a distilled five-language student to two new languages and measure forgetting.

    python3 scripts/adaptation.py --seeds 0 1 2 --out runs/adapt
"""

import argparse
import logging
import statistics
import time

from amtss.config import desk_adaptation_config
from amtss.experiments import emit_report, run_adaptation_seeds


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--epochs", type=int, default=20, help="epoch budget of each phase")
    parser.add_argument("--out", default="runs/adapt")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    runs = run_adaptation_seeds(args.seeds, lambda s: desk_adaptation_config(s, args.epochs), out_dir=args.out)
    emit_report([r for pair in runs for r in pair], args.out)
    drops = []
    for seed, (before, after) in zip(args.seeds, runs):
        ex = after.extra
        drops.append(ex["old_average_drop"])
        gaps = ", ".join(f"{k} {100 * v:.2f}" for k, v in ex["new_gap_to_teacher"].items())
        print(f"seed {seed}: old {100 * ex['old_average_before']:.2f} -> {100 * ex['old_average_after']:.2f}, "
              f"new avg {100 * ex['new_average']:.2f}, gap to teacher {gaps}")
    new_langs = runs[0][1].extra["new_gap_to_teacher"]
    median_gaps = ", ".join(
        f"{lang} {100 * statistics.median(a.extra['new_gap_to_teacher'][lang] for _, a in runs):.2f}"
        for lang in new_langs)
    print(f"median old drop {100 * statistics.median(drops):.2f} points, "
          f"median gap to teacher {median_gaps} points, wall clock {time.perf_counter() - t0:.0f}s")

if __name__ == "__main__":
    main()
