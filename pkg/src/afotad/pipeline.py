"""Sliding-window clip generation, candidate post-processing and JSON-lines I/O.

Time in a clip is measured in feature-map locations.  Location ``x`` of a
window starting at frame ``w0`` with total stride ``S`` is centred on frame
``w0 + (x + 0.5) * S``; :func:`to_frames` and :func:`to_locations` convert
between the two.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .rfam import Candidate

FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True)
class ClipWindow:
    video: str
    start: int  # first frame
    length: int  # frames
    direction: str = FORWARD

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class Annotation:
    video: str
    label: int
    start_s: float
    end_s: float

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"annotation needs end > start: {self}")


@dataclass(frozen=True)
class Detection:
    video: str
    label: int
    score: float
    start_s: float
    end_s: float


def _step(L: int) -> int:
    return int(round(0.75 * L))


def _align(frame: float, align: int) -> int:
    return int(math.floor(frame / align)) * align


def _align_up(frame: float, align: int) -> int:
    return int(math.ceil(frame / align)) * align


def make_training_clips(
    video: str,
    num_frames: int,
    L: int,
    gts: Sequence[tuple[float, float]],
    align: int = 1,
) -> list[ClipWindow]:
    """Two-way buffer: a forward sweep from frame 0 and a backward sweep from the end.

    Windows are L frames with 25% overlap; only windows intersecting at least
    one ``(start_frame, end_frame)`` instance are kept.  Identical windows from
    the two sweeps are reported once.
    """
    step = _step(L)
    fwd = []
    s = 0
    while True:
        fwd.append(s)
        s += step
        if s + L > num_frames:
            break
    bwd = []
    s = _align_up(max(num_frames - L, 0), align)
    while True:
        bwd.append(s)
        s = _align(s - step, align)
        if s < 0:
            break
    seen = set()
    out = []
    for starts, direction in ((fwd, FORWARD), (bwd, BACKWARD)):
        for s in starts:
            if s in seen:
                continue
            if any(a < s + L and b > s for a, b in gts):
                seen.add(s)
                out.append(ClipWindow(video, s, L, direction))
    return out


def make_inference_clips(video: str, num_frames: int, L: int, align: int = 1) -> list[ClipWindow]:
    """Forward sweep with 25% overlap; the last window is right-aligned to the tail."""
    step = _step(L)
    tail = _align_up(max(num_frames - L, 0), align)
    starts = [0]
    while starts[-1] + L < num_frames:
        starts.append(min(starts[-1] + step, tail))
    return [ClipWindow(video, s, L, FORWARD) for s in starts]


def to_frames(location: float, window_start: int, stride: int) -> float:
    return window_start + (location + 0.5) * stride


def to_locations(frame: float, window_start: int, stride: int) -> float:
    return (frame - window_start) / stride - 0.5


def temporal_iou(a0: float, a1: float, b0: float, b1: float) -> float:
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    return inter / ((a1 - a0) + (b1 - b0) - inter)


def _sort_key(d: Detection):
    return (-d.score, d.start_s, d.label)


def nms(dets: Iterable[Detection], threshold: float) -> list[Detection]:
    """Greedy class-wise NMS; keeps a detection iff its IoU with every kept
    same-class detection is at most ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"NMS threshold must be in [0, 1], got {threshold}")
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in sorted(dets, key=_sort_key):
        same = by_class.setdefault(d.label, [])
        if all(temporal_iou(d.start_s, d.end_s, k.start_s, k.end_s) <= threshold for k in same):
            same.append(d)
            kept.append(d)
    return kept


def window_detections(
    window: ClipWindow,
    candidates: Sequence[Candidate],
    stride: int,
    fps: float,
    duration_s: float,
    score_floor: float = 0.005,
) -> list[Detection]:
    """Filter a window's candidates by score and map them to absolute seconds,
    clipped to the video duration."""
    out = []
    for c in candidates:
        if not c.score > score_floor:
            continue
        s = to_frames(c.start, window.start, stride) / fps
        e = to_frames(c.end, window.start, stride) / fps
        s, e = max(s, 0.0), min(e, duration_s)
        if e > s:
            out.append(Detection(window.video, c.label, c.score, s, e))
    return out


def postprocess(
    windows: Sequence[tuple[ClipWindow, Sequence[Candidate]]],
    stride: int,
    fps: float,
    duration_s: float,
    score_floor: float = 0.005,
    nms_threshold: float = 0.3,
    top_k: int = 300,
) -> list[Detection]:
    """Score filter, conversion to seconds, video-level class-wise NMS, top-k."""
    dets: list[Detection] = []
    for window, cands in windows:
        dets.extend(window_detections(window, cands, stride, fps, duration_s, score_floor))
    return nms(dets, nms_threshold)[:top_k]


# ---------------------------------------------------------------------------
# JSON-lines files, fixed 6-decimal formatting


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def detection_line(d: Detection) -> str:
    return (
        f'{{"video": {json.dumps(d.video)}, "class": {d.label}, "score": {_fmt(d.score)}, '
        f'"start_s": {_fmt(d.start_s)}, "end_s": {_fmt(d.end_s)}}}'
    )


def annotation_line(a: Annotation) -> str:
    return (
        f'{{"video": {json.dumps(a.video)}, "class": {a.label}, '
        f'"start_s": {_fmt(a.start_s)}, "end_s": {_fmt(a.end_s)}}}'
    )


def write_detections(path: str | Path, dets: Iterable[Detection]) -> None:
    Path(path).write_text("".join(detection_line(d) + "\n" for d in dets))


def write_annotations(path: str | Path, anns: Iterable[Annotation]) -> None:
    Path(path).write_text("".join(annotation_line(a) + "\n" for a in anns))


def _records(path: str | Path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def read_detections(path: str | Path) -> list[Detection]:
    return [
        Detection(r["video"], int(r["class"]), float(r["score"]), float(r["start_s"]), float(r["end_s"]))
        for r in _records(path)
    ]


def read_annotations(path: str | Path) -> list[Annotation]:
    return [
        Annotation(r["video"], int(r["class"]), float(r["start_s"]), float(r["end_s"]))
        for r in _records(path)
    ]
