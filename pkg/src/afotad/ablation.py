"""Receptive-field ablation grid: down-sampler x dilation x deformable layers."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .evaluation import EvalConfig
from .rfam import ModelConfig
from .synthdata import Dataset
from .training import TrainConfig

log = logging.getLogger(__name__)

DILATIONS = (1, 2, 3, 4)
DEFORMABLE = (0, 1, 2, 3)


@dataclass(frozen=True, order=True)
class Cell:
    downsample: bool
    dilation: int
    num_deformable: int

    def __str__(self) -> str:
        return f"down={'on' if self.downsample else 'off'} dil={self.dilation} deform={self.num_deformable}"

    @classmethod
    def parse(cls, text: str) -> Cell:
        """``"1,4,0"`` -> down-sampler on, dilation 4, no deformable layer."""
        try:
            d, r, n = (int(v) for v in text.split(","))
        except ValueError:
            raise ValueError(f"cell must look like 'down,dilation,deformable', got {text!r}") from None
        cell = cls(bool(d), r, n)
        if cell not in grid():
            raise ValueError(f"{cell} is not a valid grid cell")
        return cell


def is_valid(dilation: int, num_deformable: int, depth: int = 3, dilated_last: int = 2) -> bool:
    """A rate above 1 needs at least one dilated layer left plain; otherwise
    the cell would duplicate its rate-1 twin."""
    plain_dilated = max(0, dilated_last - num_deformable)
    return dilation == 1 or plain_dilated > 0


def grid() -> list[Cell]:
    return [
        Cell(down, r, n)
        for down in (False, True)
        for r in DILATIONS
        for n in DEFORMABLE
        if is_valid(r, n)
    ]


def model_for(cell: Cell, base: ModelConfig) -> ModelConfig:
    kw = {k: v for k, v in base.to_dict().items()
          if k not in ("downsample", "dilations", "num_deformable")}
    return ModelConfig.variant(cell.downsample, cell.dilation, cell.num_deformable, **kw)


@dataclass
class CellResult:
    cell: Cell
    seeds: tuple[int, ...]
    maps: tuple[float, ...]

    @property
    def median(self) -> float:
        return float(np.median(self.maps))

    @property
    def low(self) -> float:
        return min(self.maps)

    @property
    def high(self) -> float:
        return max(self.maps)

    def to_dict(self) -> dict:
        return {
            "downsample": self.cell.downsample, "dilation": self.cell.dilation,
            "num_deformable": self.cell.num_deformable, "seeds": list(self.seeds),
            "map50": [round(m, 6) for m in self.maps], "median": round(self.median, 6),
        }


def run_one(ds: Dataset, cell: Cell, base: TrainConfig, seed: int) -> float:
    from .engine import fit_and_evaluate

    cfg = replace(base, model=model_for(cell, base.model), seed=seed, checkpoint_every=0)
    report, _ = fit_and_evaluate(ds, cfg, EvalConfig(thresholds=(0.5,)))
    log.info("%s seed %d: mAP@0.5 %.4f", cell, seed, report.mean_ap(0.5))
    return report.mean_ap(0.5)


_worker_ds: Dataset | None = None


def _init_worker(ds: Dataset) -> None:
    global _worker_ds
    _worker_ds = ds


def _run_job(job: tuple[Cell, TrainConfig, int]) -> float:
    cell, base, seed = job
    return run_one(_worker_ds, cell, base, seed)


def run_grid(
    ds: Dataset, base: TrainConfig, cells: Iterable[Cell] | None = None,
    seeds: Sequence[int] = (0, 1, 2), workers: int = 1,
) -> list[CellResult]:
    """Train and evaluate every cell under every seed at ``base``'s budget."""
    cells = list(cells) if cells is not None else grid()
    jobs = [(c, base, s) for c in cells for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ds,)) as pool:
            scores = list(pool.map(_run_job, jobs))
    else:
        scores = [run_one(ds, c, base, s) for c, base, s in jobs]
    k = len(seeds)
    return [CellResult(c, tuple(seeds), tuple(scores[i * k : (i + 1) * k])) for i, c in enumerate(cells)]


def format_table(results: Sequence[CellResult]) -> str:
    """mAP@0.5 (%) medians laid out as down-sampler/deformable rows by dilation
    columns; the best cell is wrapped in ``**``."""
    by_cell = {r.cell: r for r in results}
    best = max(results, key=lambda r: r.median).cell if results else None
    head = f"{'down-sampler':<13}{'deformable':<11}" + "".join(f"{'dil=' + str(r):>11}" for r in DILATIONS)
    lines = [f"mAP@0.5 (%), median over {len(results[0].seeds) if results else 0} seed(s)", head,
             "-" * len(head)]
    for down in (False, True):
        for n in DEFORMABLE:
            row = [c for c in by_cell if c.downsample == down and c.num_deformable == n]
            if not row:
                continue
            cells = []
            for r in DILATIONS:
                c = Cell(down, r, n)
                if c not in by_cell:
                    cells.append("-")
                    continue
                v = f"{100 * by_cell[c].median:.1f}"
                cells.append(f"**{v}**" if c == best else v)
            lines.append(f"{'on' if down else 'off':<13}{n:<11}" + "".join(f"{v:>11}" for v in cells))
    if best is not None:
        lines.append(f"best: {best}")
    return "\n".join(lines) + "\n"


def results_json(results: Sequence[CellResult]) -> str:
    return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True) + "\n"


@dataclass
class DirectionalCheck:
    name: str
    passed: bool
    detail: str


def directional_checks(results: Sequence[CellResult]) -> list[DirectionalCheck]:
    """Orderings expected from a receptive-field study.

    (a) down-sampler on beats off (dilation 1, no deformable), seed ranges disjoint;
    (b) the best dilation rate beats dilation 1 on median;
    (c) one deformable layer is at least the best dilated cell and the
        dilation-1 baseline on median, with seed ranges disjoint from both.
    """
    by = {r.cell: r for r in results}
    off, base = by[Cell(False, 1, 0)], by[Cell(True, 1, 0)]
    dilated = [by[Cell(True, r, 0)] for r in DILATIONS[1:] if Cell(True, r, 0) in by]
    best_dil = max(dilated, key=lambda r: r.median)
    deform = by[Cell(True, 1, 1)]

    def fmt(r: CellResult) -> str:
        return f"{r.cell}: median {r.median:.3f} [{r.low:.3f}, {r.high:.3f}]"

    a = base.median > off.median and base.low > off.high
    b = best_dil.median > base.median
    c = (deform.median >= best_dil.median and deform.median >= base.median
         and deform.low > best_dil.high and deform.low > base.high)
    return [
        DirectionalCheck("(a) down-sampler on > off", a, f"{fmt(base)} vs {fmt(off)}"),
        DirectionalCheck("(b) best dilated > dilation 1", b, f"{fmt(best_dil)} vs {fmt(base)}"),
        DirectionalCheck("(c) 1 deformable >= best dilated, dilation 1", c,
                         f"{fmt(deform)} vs {fmt(best_dil)} and {fmt(base)}"),
    ]
