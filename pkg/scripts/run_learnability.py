"""Train the default RFAM on the learnability dataset and report mAP.

    python scripts/run_learnability.py [--iterations N] [--lr LR]
"""

import argparse
import time
from dataclasses import replace

from afotad.engine import fit_and_evaluate
from afotad.presets import LEARNABILITY_DATA, LEARNABILITY_TRAIN
from afotad.synthdata import generate


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iterations", type=int, default=LEARNABILITY_TRAIN.iterations)
    p.add_argument("--lr", type=float, default=LEARNABILITY_TRAIN.lr)
    p.add_argument("--seed", type=int, default=LEARNABILITY_TRAIN.seed)
    args = p.parse_args()

    cfg = replace(LEARNABILITY_TRAIN, iterations=args.iterations, lr=args.lr, seed=args.seed)
    ds = generate(LEARNABILITY_DATA)
    t0 = time.perf_counter()
    report, result = fit_and_evaluate(ds, cfg)
    print(report.table(), end="")
    print(f"iterations {result.iteration}  wall {time.perf_counter() - t0:.1f}s  "
          f"mAP@0.5 {report.mean_ap(0.5):.3f}")


if __name__ == "__main__":
    main()
