"""Temporal-IoU matching, per-class AP and mAP over IoU thresholds.

AP is the area under the precision/recall curve after replacing each
precision value by the maximum precision at any equal or higher recall.
Detections are matched greedily in descending score order (ties broken by
earlier start) to the unmatched ground truth of the same video and class with
the highest IoU; a match counts when that IoU is at least the threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .pipeline import Annotation, Detection

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    (a0, a1), (b0, b1) = a, b
    if not (a1 > a0 and b1 > b0):
        raise ValueError(f"degenerate segment in IoU: {a}, {b}")
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    return inter / ((a1 - a0) + (b1 - b0) - inter)


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    classes: tuple[int, ...] | None = None  # None: every class seen in the annotations

    def __post_init__(self):
        for t in self.thresholds:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"IoU threshold must lie in (0, 1], got {t}")


@dataclass
class ClassResult:
    ap: float
    tp: int
    fp: int
    num_gt: int
    flagged: bool = False  # no ground truth for this class


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    classes: tuple[int, ...]
    per_class: dict[tuple[int, float], ClassResult] = field(default_factory=dict)

    def ap(self, label: int, theta: float) -> float:
        return self.per_class[(label, theta)].ap

    def mean_ap(self, theta: float) -> float:
        if not self.classes:
            return 0.0
        return float(np.mean([self.ap(c, theta) for c in self.classes]))

    @property
    def map(self) -> dict[float, float]:
        return {t: self.mean_ap(t) for t in self.thresholds}

    def to_json(self) -> str:
        doc = {
            "thresholds": [round(t, 6) for t in self.thresholds],
            "mAP": {f"{t:.2f}": round(self.mean_ap(t), 6) for t in self.thresholds},
            "classes": {
                str(c): {
                    f"{t:.2f}": {
                        "ap": round(r.ap, 6), "tp": r.tp, "fp": r.fp,
                        "num_gt": r.num_gt, "flagged": r.flagged,
                    }
                    for t in self.thresholds
                    for r in [self.per_class[(c, t)]]
                }
                for c in self.classes
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Plain-text table: one row per class plus the mAP row, one column per threshold."""
        head = "theta".ljust(8) + "".join(f"{t:>8.1f}" for t in self.thresholds)
        rule = "-" * len(head)
        rows = [head, rule]
        for c in self.classes:
            rows.append(f"AP[{c}]".ljust(8) + "".join(f"{100 * self.ap(c, t):>8.1f}" for t in self.thresholds))
        rows.append(rule)
        rows.append("mAP".ljust(8) + "".join(f"{100 * self.mean_ap(t):>8.1f}" for t in self.thresholds))
        return "\n".join(rows) + "\n"


def _det_order(d: Detection):
    return (-d.score, d.start_s, d.label)


def match(dets: Sequence[Detection], gts: Sequence[Annotation], theta: float) -> tuple[list[bool], list[int]]:
    """Greedy matching for a single class.

    Returns a TP flag per detection (in the order given, which must already
    be score-sorted) and the index of the matched ground truth or -1.
    """
    by_video: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        by_video.setdefault(g.video, []).append(i)
    used = [False] * len(gts)
    flags, hits = [], []
    for d in dets:
        best, best_iou = -1, -1.0
        for gi in by_video.get(d.video, ()):
            if used[gi]:
                continue
            g = gts[gi]
            iou = temporal_iou((d.start_s, d.end_s), (g.start_s, g.end_s))
            if iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0 and best_iou >= theta:
            used[best] = True
            flags.append(True)
            hits.append(best)
        else:
            flags.append(False)
            hits.append(-1)
    return flags, hits


def ap_from_flags(flags: Sequence[bool], num_gt: int) -> float:
    if num_gt == 0 or not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def average_precision(dets: Sequence[Detection], gts: Sequence[Annotation], theta: float) -> float:
    """AP for one class; ``dets`` must be sorted by descending score."""
    flags, _ = match(dets, gts, theta)
    return ap_from_flags(flags, len(gts))


def evaluate(
    dets: Sequence[Detection], gts: Sequence[Annotation], config: EvalConfig = EvalConfig()
) -> EvalReport:
    classes = config.classes
    if classes is None:
        classes = tuple(sorted({g.label for g in gts}))
    report = EvalReport(tuple(config.thresholds), tuple(classes))
    for c in classes:
        cd = sorted((d for d in dets if d.label == c), key=_det_order)
        cg = [g for g in gts if g.label == c]
        for theta in config.thresholds:
            flags, _ = match(cd, cg, theta)
            tp = int(sum(flags))
            report.per_class[(c, theta)] = ClassResult(
                ap_from_flags(flags, len(cg)), tp, len(flags) - tp, len(cg), flagged=not cg
            )
    return report


def timeline_rows(
    dets: Sequence[Detection], gts: Sequence[Annotation], durations: dict[str, float] | None = None,
    theta: float = 0.5, min_score: float = 0.0,
) -> list[tuple]:
    """Rows ``(video, kind, class, start_s, end_s, score)`` for timeline plots.

    ``kind`` is ``gt``, ``correct`` (TP at ``theta``), ``wrong`` or
    ``background`` (gaps between ground-truth instances, when durations are known).
    """
    rows = []
    tp_ids = set()
    for c in sorted({d.label for d in dets} | {g.label for g in gts}):
        cd = sorted((d for d in dets if d.label == c), key=_det_order)
        cg = [g for g in gts if g.label == c]
        flags, _ = match(cd, cg, theta)
        tp_ids.update(id(d) for d, f in zip(cd, flags) if f)
    videos = sorted({g.video for g in gts} | {d.video for d in dets})
    for v in videos:
        vg = sorted((g for g in gts if g.video == v), key=lambda g: (g.start_s, g.label))
        for g in vg:
            rows.append((v, "gt", g.label, g.start_s, g.end_s, ""))
        if durations and v in durations:
            t = 0.0
            for g in vg:
                if g.start_s > t:
                    rows.append((v, "background", 0, t, g.start_s, ""))
                t = max(t, g.end_s)
            if durations[v] > t:
                rows.append((v, "background", 0, t, durations[v], ""))
        for d in sorted((d for d in dets if d.video == v), key=_det_order):
            if d.score < min_score:
                continue
            rows.append((v, "correct" if id(d) in tp_ids else "wrong", d.label, d.start_s, d.end_s, d.score))
    return rows


def write_timeline_csv(path, rows) -> None:
    lines = ["video,kind,class,start_s,end_s,score"]
    for v, kind, c, s, e, score in rows:
        sc = "" if score == "" else f"{score:.6f}"
        lines.append(f"{v},{kind},{c},{s:.6f},{e:.6f},{sc}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
