"""Receptive-field ablation: down-sampler, dilation rate and deformable layers.

By default runs the six cells needed for the directional checks; ``--full``
runs the whole 20-cell grid.

    python scripts/run_ablation.py [--full] [--workers N] [--json out.json]
"""

import argparse
import time
from pathlib import Path

from afotad.ablation import Cell, directional_checks, format_table, grid, results_json, run_grid
from afotad.presets import ABLATION_DATA, ABLATION_SEEDS, ABLATION_TRAIN
from afotad.synthdata import generate

CHECK_CELLS = [Cell(False, 1, 0), Cell(True, 1, 0), Cell(True, 2, 0), Cell(True, 3, 0),
               Cell(True, 4, 0), Cell(True, 1, 1)]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--full", action="store_true", help="all 20 valid cells")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--json", type=Path)
    args = p.parse_args()

    ds = generate(ABLATION_DATA)
    t0 = time.perf_counter()
    results = run_grid(ds, ABLATION_TRAIN, grid() if args.full else CHECK_CELLS, ABLATION_SEEDS,
                       workers=args.workers)
    print(format_table(results), end="")
    for c in directional_checks(results):
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    print(f"wall {time.perf_counter() - t0:.1f}s")
    if args.json:
        args.json.write_text(results_json(results))


if __name__ == "__main__":
    main()
