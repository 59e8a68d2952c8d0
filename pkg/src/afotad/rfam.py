"""Receptive-field adaption head: two conv branches over a temporal feature map.

The classification branch ends in a C-channel conv (C includes background),
the localization branch in a 2-channel conv split into raw start/end offsets.
Any number of trailing layers in each branch can be deformable; the rest are
plain (optionally dilated) convolutions with ReLU between layers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .deformconv import DeformConvParams, deform_layer


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4  # foreground classes + background
    in_channels: int = 32
    width: int = 32
    depth: int = 3
    kernel_size: int = 3
    num_deformable: int = 0
    dilations: tuple[int, ...] = (1, 1, 1)
    downsample: bool = True
    alpha_init: float = 1.0
    background_prior: float = 0.9

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.num_deformable <= self.depth:
            raise ValueError(
                f"num_deformable={self.num_deformable} exceeds branch depth {self.depth}"
            )
        if len(self.dilations) != self.depth:
            raise ValueError(f"need {self.depth} dilation rates, got {len(self.dilations)}")
        if any(d < 1 for d in self.dilations):
            raise ValueError(f"dilation rates must be >= 1, got {self.dilations}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @classmethod
    def variant(
        cls, downsample: bool = True, dilation: int = 1, num_deformable: int = 0,
        dilated_last: int = 2, **kw
    ) -> ModelConfig:
        """Ablation-style config: dilate the last ``dilated_last`` layers."""
        depth = kw.get("depth", 3)
        dil = tuple(dilation if i >= depth - dilated_last else 1 for i in range(depth))
        return cls(downsample=downsample, dilations=dil, num_deformable=num_deformable, **kw)

    def is_deformable(self, layer: int) -> bool:
        return layer >= self.depth - self.num_deformable

    def output_length(self, T: int) -> int:
        return T // 2 if self.downsample else T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "dilations" in d:
            d["dilations"] = tuple(d["dilations"])
        return cls(**d)


@dataclass
class HeadOutput:
    cls_logits: Tensor  # C x T'
    left: Tensor  # T'
    right: Tensor  # T'

    def __post_init__(self):
        T = self.cls_logits.shape[1]
        if self.left.shape != (T,) or self.right.shape != (T,):
            raise ad.ShapeError(
                f"head outputs disagree: logits {self.cls_logits.shape}, "
                f"left {self.left.shape}, right {self.right.shape}"
            )

    @property
    def length(self) -> int:
        return self.cls_logits.shape[1]


@dataclass(frozen=True)
class Candidate:
    location: int
    label: int
    score: float
    start: float
    end: float
    left: float
    right: float


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class RFAM:
    """Parameters and forward pass of the two-branch head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.cls_layers = self._build_branch(config.num_classes, rng)
        self.loc_layers = self._build_branch(2, rng)
        self._init_heads()
        self.alpha = parameter(np.asarray(config.alpha_init), name="alpha")

    def _build_branch(self, out_channels: int, rng: np.random.Generator) -> list:
        cfg = self.config
        layers = []
        for i in range(cfg.depth):
            cin = cfg.in_channels if i == 0 else cfg.width
            cout = out_channels if i == cfg.depth - 1 else cfg.width
            if cfg.is_deformable(i):
                layers.append(DeformConvParams.init(cin, cout, cfg.kernel_size, rng))
            else:
                std = np.sqrt(2.0 / (cin * cfg.kernel_size))
                layers.append(ConvParams(
                    parameter(rng.standard_normal((cout, cin, cfg.kernel_size)) * std),
                    parameter(np.zeros(cout)),
                ))
        return layers

    def _init_heads(self) -> None:
        C = self.config.num_classes
        for head in (self.cls_layers[-1], self.loc_layers[-1]):
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0
        # background softmax probability starts at background_prior
        p = self.config.background_prior
        fg = (1.0 - p) / (C - 1)
        self.cls_layers[-1].bias.data[0] = np.log(p / fg)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for branch, layers in (("cls", self.cls_layers), ("loc", self.loc_layers)):
            for i, layer in enumerate(layers):
                for k, t in layer.tensors().items():
                    out[f"{branch}.{i}.{k}"] = t
        out["alpha"] = self.alpha
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _run_branch(self, x: Tensor, layers: list) -> Tensor:
        cfg = self.config
        for i, layer in enumerate(layers):
            if isinstance(layer, DeformConvParams):
                x = deform_layer(x, layer)
            else:
                x = ad.conv1d(x, layer.weight, layer.bias, dilation=cfg.dilations[i])
            if i < len(layers) - 1:
                x = ad.relu(x)
        return x

    def forward(self, features: Tensor) -> HeadOutput:
        cfg = self.config
        if features.data.ndim != 2 or features.shape[0] != cfg.in_channels:
            raise ad.ShapeError(
                f"features must be {cfg.in_channels} x T, got {features.shape}"
            )
        x = features
        if cfg.downsample:
            if x.shape[1] % 2:
                raise ad.ShapeError(f"down-sampler needs even T, got {x.shape[1]}")
            x = ad.maxpool1d(x)
        logits = self._run_branch(x, self.cls_layers)
        loc = self._run_branch(x, self.loc_layers)
        return HeadOutput(logits, ad.take(loc, 0), ad.take(loc, 1))

    __call__ = forward

    # ------------------------------------------------------------------
    # persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        bad = [
            f"{k}: checkpoint {tuple(state[k].shape)} vs model {params[k].shape}"
            for k in sorted(set(params) & set(state))
            if tuple(state[k].shape) != params[k].shape
        ]
        if missing or extra or bad:
            lines = [f"missing {k}" for k in missing] + [f"unexpected {k}" for k in extra] + bad
            raise ValueError("checkpoint does not match model:\n  " + "\n  ".join(lines))
        for k, t in params.items():
            t.data[...] = state[k]


def decode(head: HeadOutput, alpha: float) -> list[Candidate]:
    """One candidate per location carrying its best foreground class.

    ``l = exp(alpha * l')``, ``r = exp(alpha * r')``, ``s = x - l``, ``e = x + r``.
    """
    logits = head.cls_logits.data
    z = logits - logits.max(axis=0, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=0, keepdims=True)
    fg = prob[1:]
    labels = fg.argmax(axis=0) + 1
    scores = fg.max(axis=0)
    a = float(alpha.data) if isinstance(alpha, Tensor) else float(alpha)
    lv = np.exp(a * head.left.data)
    rv = np.exp(a * head.right.data)
    return [
        Candidate(x, int(labels[x]), float(scores[x]), x - float(lv[x]), x + float(rv[x]),
                  float(lv[x]), float(rv[x]))
        for x in range(head.length)
    ]


# ---------------------------------------------------------------------------
# Flat binary parameter container
#
#   bytes 0..7   magic b"AFOTAD\x00P"
#   bytes 8..11  little-endian uint32 manifest length N
#   next N bytes UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
#   remainder    float64 little-endian payload; each tensor's row-major values
#                start at manifest "offset" bytes from the start of the payload

MAGIC = b"AFOTAD\x00P"


def save_container(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter container")
    (n,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12 : 12 + n])
    payload = memoryview(raw)[12 + n :]
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, manifest["meta"]


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    extra: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"velocity/{k}": v for k, v in self.velocity.items()})
        meta = {"model": self.config.to_dict(), "iteration": self.iteration, **self.extra}
        save_container(path, tensors, meta)

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        tensors, meta = load_container(path)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        vel = {k[9:]: v for k, v in tensors.items() if k.startswith("velocity/")}
        meta = dict(meta)
        config = ModelConfig.from_dict(meta.pop("model"))
        iteration = meta.pop("iteration", 0)
        return cls(config, params, vel, iteration, meta)

    def model(self) -> RFAM:
        m = RFAM(self.config)
        m.load_state_dict(self.params)
        return m
