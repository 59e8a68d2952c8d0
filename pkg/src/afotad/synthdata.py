"""Synthetic untrimmed "videos": noisy feature sequences with planted actions.

Each foreground class owns a smooth template over D channels.  A channel's
value inside an instance is ``a[c, d] * cos(pi * k[c, d] * u + phi[c, d])``
where ``u`` in [0, 1] is the relative position inside the instance, so the
template stretches with the instance duration.  Outside the instance the
template is held at its boundary value and faded to zero by a raised-cosine
ramp.  White Gaussian noise is added on top.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .pipeline import Annotation, read_annotations, write_annotations

FEATURE_MAGIC = b"AFOTADF1"
_HEADER = struct.Struct("<IIId")  # channels, length, stride (frames), fps


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    num_train: int = 200
    num_test: int = 100
    min_frames: int = 2000
    max_frames: int = 4000
    num_classes: int = 3  # foreground classes
    min_duration_s: float = 2.0
    max_duration_s: float = 12.0
    min_instances: int = 2
    max_instances: int = 5
    min_gap_s: float = 1.0
    channels: int = 32
    stride: int = 8
    fps: float = 25.0
    noise: float = 1.0
    ramp_s: float = 0.5
    overlap_fraction: float = 0.0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class")
        if self.num_train < 0 or self.num_test < 0:
            raise ValueError("video counts must be non-negative")
        if not 0 < self.min_duration_s <= self.max_duration_s:
            raise ValueError("need 0 < min_duration_s <= max_duration_s")
        if self.min_duration_s * self.fps < 2 * self.stride:
            raise ValueError("instances must span at least two feature steps")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")
        if self.min_frames > self.max_frames or self.min_frames < 1:
            raise ValueError("bad video length range")
        need = self.max_instances * self.max_duration_s + (self.max_instances + 1) * self.min_gap_s
        if need * self.fps > self.min_frames:
            raise ValueError(
                f"infeasible packing: {self.max_instances} instances of up to "
                f"{self.max_duration_s}s need {need:.1f}s but videos may be only "
                f"{self.min_frames / self.fps:.1f}s long"
            )
        if not 0.0 <= self.overlap_fraction <= 0.2:
            raise ValueError("overlap_fraction must lie in [0, 0.2]")

    @property
    def frame_align(self) -> int:
        return 2 * self.stride


@dataclass(frozen=True)
class ClassTemplates:
    amplitude: np.ndarray  # num_classes x D
    harmonic: np.ndarray  # num_classes x D, integer
    phase: np.ndarray  # num_classes x D

    @classmethod
    def make(cls, num_classes: int, channels: int, rng: np.random.Generator) -> ClassTemplates:
        amp = rng.standard_normal((num_classes, channels))
        harm = rng.integers(0, 3, size=(num_classes, channels))
        phase = rng.uniform(0, 2 * np.pi, size=(num_classes, channels)) * (harm > 0)
        return cls(amp, harm, phase)

    def evaluate(self, label: int, u: np.ndarray) -> np.ndarray:
        """D x len(u) template values for 1-based ``label`` at relative positions ``u``."""
        c = label - 1
        return self.amplitude[c][:, None] * np.cos(
            np.pi * self.harmonic[c][:, None] * u[None, :] + self.phase[c][:, None]
        )


@dataclass
class Video:
    name: str
    split: str
    num_frames: int
    seed: int
    annotations: list[Annotation]
    features: np.ndarray  # D x T

    fps: float = 25.0

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.fps


@dataclass
class Dataset:
    spec: SynthSpec
    templates: ClassTemplates
    videos: list[Video] = field(default_factory=list)

    def split(self, name: str) -> list[Video]:
        return [v for v in self.videos if v.split == name]

    def annotations(self, split: str) -> list[Annotation]:
        return [a for v in self.split(split) for a in v.annotations]


def feature_times(num_steps: int, stride: int, fps: float) -> np.ndarray:
    """Centre time in seconds of each feature step."""
    return (np.arange(num_steps) + 0.5) * stride / fps


def render(
    anns: list[Annotation], num_frames: int, spec: SynthSpec, templates: ClassTemplates,
    noise_seed: int | None,
) -> np.ndarray:
    T = num_frames // spec.stride
    t = feature_times(T, spec.stride, spec.fps)
    x = np.zeros((spec.channels, T))
    for a in anns:
        u = np.clip((t - a.start_s) / (a.end_s - a.start_s), 0.0, 1.0)
        dist = np.maximum(a.start_s - t, t - a.end_s)  # > 0 outside the instance
        env = np.where(
            dist <= 0, 1.0,
            np.where(dist < spec.ramp_s, 0.5 * (1 + np.cos(np.pi * dist / spec.ramp_s)), 0.0),
        )
        active = env > 0
        x[:, active] += templates.evaluate(a.label, u[active]) * env[active]
    if noise_seed is not None and spec.noise > 0:
        x += spec.noise * np.random.default_rng(noise_seed).standard_normal(x.shape)
    return x


def _place_instances(spec: SynthSpec, num_frames: int, rng: np.random.Generator, name: str):
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    lo, hi = np.log(spec.min_duration_s), np.log(spec.max_duration_s)
    durations = np.exp(rng.uniform(lo, hi, size=n))
    labels = rng.integers(1, spec.num_classes + 1, size=n)
    total = num_frames / spec.fps
    free = total - durations.sum() - (n + 1) * spec.min_gap_s
    if free < 0:
        raise ValueError(f"infeasible packing for video {name}")
    cuts = np.sort(rng.uniform(0, free, size=n))
    gaps = np.diff(np.concatenate([[0.0], cuts])) + spec.min_gap_s
    anns = []
    t = 0.0
    for g, dur, lab in zip(gaps, durations, labels):
        t += g
        # times are stored at the precision of the annotation files
        anns.append(Annotation(name, int(lab), round(float(t), 6), round(float(t + dur), 6)))
        t += dur
    return anns


def generate(spec: SynthSpec) -> Dataset:
    """Build the dataset; a pure function of ``spec``."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    tmpl_seq, *video_seqs = root.spawn(1 + spec.num_train + spec.num_test)
    templates = ClassTemplates.make(spec.num_classes, spec.channels, np.random.default_rng(tmpl_seq))
    ds = Dataset(spec, templates)
    align = spec.frame_align
    for i, seq in enumerate(video_seqs):
        split = "train" if i < spec.num_train else "test"
        idx = i if split == "train" else i - spec.num_train
        name = f"{split}_{idx:04d}"
        rng = np.random.default_rng(seq)
        num_frames = int(rng.integers(spec.min_frames // align, spec.max_frames // align + 1)) * align
        anns = _place_instances(spec, num_frames, rng, name)
        noise_seed = int(rng.integers(2**63))
        feats = render(anns, num_frames, spec, templates, noise_seed)
        ds.videos.append(Video(name, split, num_frames, noise_seed, anns, feats, spec.fps))
    if spec.overlap_fraction > 0:
        ds = overlap_injection(ds, spec.overlap_fraction)
    return ds


def ambiguous_fraction(anns: list[Annotation], num_frames: int, stride: int, fps: float) -> float:
    """Fraction of in-instance feature locations covered by two or more instances."""
    t = feature_times(num_frames // stride, stride, fps)
    cover = np.zeros(len(t), dtype=int)
    for a in anns:
        cover += (t > a.start_s) & (t < a.end_s)
    inside = np.count_nonzero(cover)
    return float(np.count_nonzero(cover >= 2) / inside) if inside else 0.0


def overlap_injection(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Shift instances into their right neighbours until ``fraction`` of the
    in-instance locations of every split are ambiguous.

    Each moved instance overlaps its neighbour by half of the shorter duration.
    An instance is moved at most once and never serves as the target of a
    move after moving itself.  Features are re-rendered with the original noise.
    """
    if not 0.0 <= fraction <= 0.2:
        raise ValueError(f"fraction must lie in [0, 0.2], got {fraction}")
    if fraction == 0:
        return ds
    spec = ds.spec
    rng = np.random.default_rng(seed)
    anns = {v.name: list(v.annotations) for v in ds.videos}
    by_split: dict[str, list[tuple[str, int]]] = {}
    for v in ds.videos:
        by_split.setdefault(v.split, []).extend((v.name, i) for i in range(len(v.annotations) - 1))
    for split, pairs in by_split.items():
        order = rng.permutation(len(pairs))
        used: set[tuple[str, int]] = set()
        split_videos = [v for v in ds.videos if v.split == split]
        for j in order:
            if _split_ambiguity(split_videos, anns, spec) >= fraction:
                break
            name, i = pairs[j]
            if (name, i) in used or (name, i + 1) in used:
                continue
            a, b = anns[name][i], anns[name][i + 1]
            overlap = 0.5 * min(a.end_s - a.start_s, b.end_s - b.start_s)
            shift = (b.start_s - a.end_s) + overlap
            anns[name][i] = replace(
                a, start_s=round(a.start_s + shift, 6), end_s=round(a.end_s + shift, 6)
            )
            used.update({(name, i), (name, i + 1)})
    out = Dataset(replace(spec, overlap_fraction=fraction), ds.templates)
    for v in ds.videos:
        feats = render(anns[v.name], v.num_frames, spec, ds.templates, v.seed)
        out.videos.append(replace(v, annotations=anns[v.name], features=feats))
    return out


def _split_ambiguity(videos: list[Video], anns: dict, spec: SynthSpec) -> float:
    amb = inside = 0
    for v in videos:
        t = feature_times(v.num_frames // spec.stride, spec.stride, spec.fps)
        cover = np.zeros(len(t), dtype=int)
        for a in anns[v.name]:
            cover += (t > a.start_s) & (t < a.end_s)
        amb += np.count_nonzero(cover >= 2)
        inside += np.count_nonzero(cover)
    return amb / inside if inside else 0.0


# ---------------------------------------------------------------------------
# On-disk layout
#
#   <root>/dataset.json             spec, class templates, per-video metadata
#   <root>/features/<video>.feat    FEATURE_MAGIC, header (D, T, stride, fps), float64 D x T
#   <root>/<split>.jsonl            annotations, one instance per line


def write_features(path: str | Path, feats: np.ndarray, stride: int, fps: float) -> None:
    D, T = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(_HEADER.pack(D, T, stride, fps))
        fh.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())


def read_features(path: str | Path) -> tuple[np.ndarray, int, float]:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    D, T, stride, fps = _HEADER.unpack_from(raw, 8)
    data = np.frombuffer(raw, dtype="<f8", offset=8 + _HEADER.size, count=D * T)
    return data.reshape(D, T).astype(np.float64), stride, fps


def save_dataset(ds: Dataset, root: str | Path) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    meta = {
        "spec": asdict(ds.spec),
        "templates": {
            "amplitude": ds.templates.amplitude.tolist(),
            "harmonic": ds.templates.harmonic.tolist(),
            "phase": ds.templates.phase.tolist(),
        },
        "videos": [
            {"name": v.name, "split": v.split, "num_frames": v.num_frames, "seed": v.seed}
            for v in ds.videos
        ],
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for v in ds.videos:
        write_features(root / "features" / f"{v.name}.feat", v.features, ds.spec.stride, ds.spec.fps)
    for split in ("train", "test"):
        write_annotations(root / f"{split}.jsonl", ds.annotations(split))


def load_dataset(root: str | Path, splits: tuple[str, ...] = ("train", "test")) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    spec = SynthSpec(**meta["spec"])
    tm = meta["templates"]
    templates = ClassTemplates(
        np.array(tm["amplitude"]), np.array(tm["harmonic"], dtype=int), np.array(tm["phase"])
    )
    ds = Dataset(spec, templates)
    anns: dict[str, list[Annotation]] = {}
    for split in splits:
        path = root / f"{split}.jsonl"
        if path.exists():
            for a in read_annotations(path):
                anns.setdefault(a.video, []).append(a)
    for vm in meta["videos"]:
        if vm["split"] not in splits:
            continue
        feats, _, _ = read_features(root / "features" / f"{vm['name']}.feat")
        ds.videos.append(Video(vm["name"], vm["split"], vm["num_frames"], vm["seed"],
                               anns.get(vm["name"], []), feats, spec.fps))
    return ds
