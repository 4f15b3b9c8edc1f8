"""Adaptive multi-teacher distillation vs the mixed-data single-teacher baseline over several seeds.

    python3 scripts/main_comparison.py --seeds 0 1 2 3 4 --out runs/main
"""

import argparse
import logging
import statistics
import time

from amtss.config import desk_config
from amtss.experiments import emit_report, run_main_comparison


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--epochs", type=int, default=None, help="override the adaptive epoch budget")
    parser.add_argument("--out", default="runs/main")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    pairs = run_main_comparison(
        args.seeds, lambda s: desk_config(s, args.epochs) if args.epochs else desk_config(s), args.out)
    emit_report([r for pair in pairs for r in pair], args.out)
    for (a, b), seed in zip(pairs, args.seeds):
        print(f"seed {seed}: AMTSS {100 * a.average:.2f}  baseline {100 * b.average:.2f}  "
              f"(epochs {a.extra['epochs']}, {a.extra['terminated']})")
    med_a = statistics.median(a.average for a, _ in pairs)
    med_b = statistics.median(b.average for _, b in pairs)
    print(f"median AMTSS {100 * med_a:.2f}  median baseline {100 * med_b:.2f}  "
          f"wall clock {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
