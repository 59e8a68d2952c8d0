"""Training and inference loops over a synthetic dataset."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward
from .evaluation import EvalConfig, EvalReport, evaluate
from .pipeline import (
    ClipWindow, Detection, make_inference_clips, make_training_clips, postprocess, to_locations,
)
from .rfam import RFAM, Checkpoint, decode
from .synthdata import Dataset, Video
from .training import SGD, GroundTruthInstance, TargetMap, TrainConfig, assign_targets, batch_joint_loss

log = logging.getLogger(__name__)


def total_stride(feature_stride: int, downsample: bool) -> int:
    return feature_stride * (2 if downsample else 1)


def clip_features(video: Video, window: ClipWindow, feature_stride: int) -> np.ndarray:
    """D x (L / stride) slice of a video's features, zero padded past the end."""
    a = window.start // feature_stride
    n = window.length // feature_stride
    out = np.zeros((video.features.shape[0], n))
    seg = video.features[:, a : a + n]
    out[:, : seg.shape[1]] = seg
    return out


def clip_instances(video: Video, window: ClipWindow, stride: int, fps: float) -> list[GroundTruthInstance]:
    """Annotations touching the window, in the window's feature-map units."""
    out = []
    for a in video.annotations:
        s, e = a.start_s * fps, a.end_s * fps
        if s < window.end and e > window.start:
            out.append(GroundTruthInstance(
                a.label, to_locations(s, window.start, stride), to_locations(e, window.start, stride)
            ))
    return out


@dataclass
class TrainingClip:
    window: ClipWindow
    features: np.ndarray
    targets: TargetMap


def build_training_clips(ds: Dataset, cfg: TrainConfig) -> list[TrainingClip]:
    spec = ds.spec
    S = total_stride(spec.stride, cfg.model.downsample)
    clips = []
    for v in ds.split("train"):
        gts = [(a.start_s * spec.fps, a.end_s * spec.fps) for a in v.annotations]
        for w in make_training_clips(v.name, v.num_frames, cfg.clip_length, gts, align=spec.frame_align):
            feats = clip_features(v, w, spec.stride)
            T_out = cfg.model.output_length(feats.shape[1])
            tm = assign_targets(T_out, clip_instances(v, w, S, spec.fps))
            clips.append(TrainingClip(w, feats, tm))
    return clips


@dataclass
class TrainResult:
    model: RFAM
    optimizer: SGD
    iteration: int
    history: list[tuple[int, float, float]]
    seconds: float


def train(
    ds: Dataset,
    cfg: TrainConfig,
    model: RFAM | None = None,
    optimizer: SGD | None = None,
    start_iteration: int = 0,
    clips: Sequence[TrainingClip] | None = None,
    on_checkpoint: Callable[[RFAM, SGD, int], None] | None = None,
    time_budget_s: float | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Mini-batch SGD; deterministic given ``cfg.seed``.

    Batches are drawn by walking seeded permutations of the training clips;
    resuming at ``start_iteration`` replays the same batch sequence.
    """
    if model is None:
        model = RFAM(cfg.model, seed=cfg.seed)
    if optimizer is None:
        optimizer = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
    if clips is None:
        clips = build_training_clips(ds, cfg)
    if not clips:
        raise ValueError("no training clips: dataset has no annotated training videos")
    n = len(clips)
    per_epoch = max(1, n // cfg.batch_size)
    rng = np.random.default_rng(cfg.seed + 1)
    perms: dict[int, np.ndarray] = {}

    def batch_indices(it: int) -> np.ndarray:
        epoch, k = divmod(it, per_epoch)
        while len(perms) <= epoch:
            perms[len(perms)] = rng.permutation(n)
        return perms[epoch][k * cfg.batch_size : (k + 1) * cfg.batch_size]

    history = []
    t0 = time.perf_counter()
    it = start_iteration
    while it < cfg.iterations:
        idx = batch_indices(it)
        optimizer.zero_grad()
        heads = [model(Tensor(clips[i].features)) for i in idx]
        loss = batch_joint_loss(heads, model.alpha, [clips[i].targets for i in idx], cfg.beta)
        lc, ll, tot = loss.values()
        if not math.isfinite(tot):
            raise NonFiniteError(f"non-finite loss at iteration {it}")
        backward(loss.total)
        optimizer.step(cfg.lr_at(it))
        it += 1
        history.append((it, lc, ll))
        if on_step:
            on_step(it, lc, ll)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d  loss_cls %.4f  loss_loc %.4f", it, lc, ll)
        if on_checkpoint and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            on_checkpoint(model, optimizer, it)
        if time_budget_s is not None and time.perf_counter() - t0 > time_budget_s:
            break
    return TrainResult(model, optimizer, it, history, time.perf_counter() - t0)


def infer_video(
    model: RFAM, video: Video, clip_length: int, feature_stride: int, fps: float,
    score_floor: float = 0.005, nms_threshold: float = 0.3, top_k: int = 300,
) -> list[Detection]:
    S = total_stride(feature_stride, model.config.downsample)
    windows = []
    for w in make_inference_clips(video.name, video.num_frames, clip_length, align=2 * feature_stride):
        head = model(Tensor(clip_features(video, w, feature_stride)))
        windows.append((w, decode(head, model.alpha)))
    return postprocess(windows, S, fps, video.duration_s, score_floor, nms_threshold, top_k)


def infer(model: RFAM, ds: Dataset, split: str, clip_length: int, **kw) -> list[Detection]:
    dets = []
    for v in ds.split(split):
        dets.extend(infer_video(model, v, clip_length, ds.spec.stride, ds.spec.fps, **kw))
    return dets


def fit_and_evaluate(ds: Dataset, cfg: TrainConfig, eval_config: EvalConfig = EvalConfig(),
                     split: str = "test") -> tuple[EvalReport, TrainResult]:
    result = train(ds, cfg)
    dets = infer(result.model, ds, split, cfg.clip_length)
    classes = tuple(range(1, ds.spec.num_classes + 1))
    cfg_eval = EvalConfig(eval_config.thresholds, classes)
    return evaluate(dets, ds.annotations(split), cfg_eval), result


def save_checkpoint(path: str | Path, model: RFAM, optimizer: SGD, iteration: int, extra=None) -> None:
    Checkpoint(model.config, model.state_dict(), {k: v.copy() for k, v in optimizer.velocity.items()},
               iteration, extra or {}).save(path)
