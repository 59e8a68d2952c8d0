"""Target assignment, the joint classification + temporal-IoU loss, and SGD."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .rfam import HeadOutput, ModelConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundTruthInstance:
    """One annotated action in feature-map units (``end > start``)."""

    label: int
    start: float
    end: float

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError(f"instance needs end > start, got ({self.start}, {self.end})")
        if self.label < 1:
            raise ValueError(f"instance label must be a foreground id >= 1, got {self.label}")

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)


@dataclass
class TargetMap:
    labels: np.ndarray  # int, 0 = background
    left: np.ndarray  # l^ = x - s^ at positives, 0 elsewhere
    right: np.ndarray  # r^ = e^ - x at positives, 0 elsewhere

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)

    @property
    def num_pos(self) -> int:
        return int(np.count_nonzero(self.labels))

    def __len__(self) -> int:
        return len(self.labels)


def assign_targets(length: int, gts: Sequence[GroundTruthInstance]) -> TargetMap:
    """Label each integer location ``x`` in ``[0, length)``.

    A location is positive when it lies strictly inside an instance.  When it
    lies inside several, the instance whose center is nearest wins, with ties
    going to the earlier instance.
    """
    labels = np.zeros(length, dtype=np.int64)
    left = np.zeros(length)
    right = np.zeros(length)
    best = np.full(length, np.inf)
    xs = np.arange(length, dtype=np.float64)
    for g in gts:
        inside = (xs > g.start) & (xs < g.end)
        dist = np.abs(xs - g.center)
        take = inside & (dist < best)
        best[take] = dist[take]
        labels[take] = g.label
        left[take] = xs[take] - g.start
        right[take] = g.end - xs[take]
    return TargetMap(labels, left, right)


def iou_loss_terms(l: Tensor, r: Tensor, lt: np.ndarray, rt: np.ndarray) -> Tensor:
    """Per-positive ``-ln(I/U)`` for predicted and target (left, right) extents."""
    lt_t, rt_t = Tensor(lt), Tensor(rt)
    inter = ad.minimum(l, lt_t) + ad.minimum(r, rt_t)
    union = (l + r) + Tensor(np.asarray(lt) + np.asarray(rt)) - inter
    return ad.log(union) - ad.log(inter)


def iou_loss(pred, target) -> Tensor:
    """Mean temporal IoU loss over positives; 0 when there are none.

    ``pred`` and ``target`` are ``(left, right)`` pairs of scalars, arrays or
    tensors (targets are treated as constants).
    """
    l, r = (p if isinstance(p, Tensor) else Tensor(np.atleast_1d(p)) for p in pred)
    lt, rt = (np.atleast_1d(np.asarray(t.data if isinstance(t, Tensor) else t, dtype=float))
              for t in target)
    if l.size == 0:
        return Tensor(0.0)
    return ad.mean(iou_loss_terms(l, r, lt, rt))


def cls_loss(logits: Tensor, targets: TargetMap) -> Tensor:
    """Mean softmax cross-entropy over all locations, background included."""
    return ad.scale(_cls_sum(logits, targets), 1.0 / len(targets))


def _cls_sum(logits: Tensor, targets: TargetMap) -> Tensor:
    C, T = logits.shape
    onehot = np.zeros((C, T))
    onehot[targets.labels, np.arange(T)] = 1.0
    return ad.scale(ad.sum(ad.mul(ad.log_softmax(logits), Tensor(onehot))), -1.0)


@dataclass
class LossBreakdown:
    loss_cls: Tensor
    loss_loc: Tensor
    total: Tensor
    beta: float
    num_pos: int

    def values(self) -> tuple[float, float, float]:
        return self.loss_cls.item(), self.loss_loc.item(), self.total.item()


def batch_joint_loss(
    heads: Sequence[HeadOutput], alpha: Tensor, targets: Sequence[TargetMap], beta: float = 1.0
) -> LossBreakdown:
    """``loss_cls + beta * loss_loc`` pooled over a mini-batch of clips.

    Classification is averaged over every location in the batch and the IoU
    term over every positive in the batch.
    """
    cls_terms, loc_terms = [], []
    n_loc = 0
    n_pos = 0
    for head, tm in zip(heads, targets):
        if head.length != len(tm):
            raise ad.ShapeError(f"head length {head.length} vs target length {len(tm)}")
        cls_terms.append(_cls_sum(head.cls_logits, tm))
        n_loc += len(tm)
        pos = tm.positives
        if pos.size:
            l = ad.exp(ad.scale(ad.take(head.left, pos), alpha))
            r = ad.exp(ad.scale(ad.take(head.right, pos), alpha))
            loc_terms.append(ad.sum(iou_loss_terms(l, r, tm.left[pos], tm.right[pos])))
            n_pos += pos.size
    loss_cls = ad.scale(_total(cls_terms), 1.0 / n_loc)
    if n_pos:
        loss_loc = ad.scale(_total(loc_terms), 1.0 / n_pos)
        total = loss_cls + ad.scale(loss_loc, beta)
    else:
        loss_loc = Tensor(0.0)
        total = loss_cls
    return LossBreakdown(loss_cls, loss_loc, total, beta, n_pos)


def joint_loss(head: HeadOutput, alpha: Tensor, targets: TargetMap, beta: float = 1.0) -> LossBreakdown:
    return batch_joint_loss([head], alpha, [targets], beta)


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


class SGD:
    """Classical momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {k}")
        for k, p in self.params.items():
            g = 0.0 if p.grad is None else p.grad
            v = self.velocity[k]
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def sgd_step(params, grads, velocity, lr, momentum=0.9, weight_decay=5e-4):
    """Functional form of one momentum step on plain arrays; returns (params, velocity)."""
    new_v = [momentum * v + g + weight_decay * p for p, g, v in zip(params, grads, velocity)]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    new_p = [p - lr * v for p, v in zip(params, new_v)]
    return new_p, new_v


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 0.0006
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta: float = 1.0
    batch_size: int = 4
    iterations: int = 2000
    lr_decay: float = 0.9
    lr_step: int = 500
    clip_length: int = 768
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.lr_decay ** (iteration // self.lr_step)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(model=model, **d)

    @classmethod
    def from_json(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))
