"""Modulated temporal deformable convolution.

Each output location ``p`` samples the input at ``p + p_k + dp_k(p)`` for the
K kernel taps, using linear interpolation between neighbouring frames with
zeros outside ``[0, T-1]``, and weighs every sample by a modulation scalar
``dm_k(p)``.  Offsets and modulation are predicted per location and per tap
and are shared across input channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, conv1d, parameter, sigmoid


def _sample_positions(offsets: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Left neighbour index and interpolation weight for every (tap, location).

    The left neighbour is ``ceil(pos) - 1`` so that exact integer positions
    sit at the right end of their interval (weight 1); the offset derivative
    there is the left-interval slope.
    """
    K = offsets.shape[0]
    half = (K - 1) // 2
    base = np.arange(T)[None, :] + np.arange(-half, half + 1)[:, None]
    pos = base + offsets
    left = np.ceil(pos).astype(np.int64) - 1
    frac = pos - left
    return left, frac


def deform_conv1d(
    x: Tensor, weight: Tensor, bias: Tensor, offsets: Tensor, modulation: Tensor
) -> Tensor:
    """``y[o, p] = b[o] + sum_{c,k} w[o,c,k] * x~[c, p + p_k + dp[k,p]] * dm[k,p]``.

    Shapes: ``x`` Cin x T, ``weight`` Cout x Cin x K, ``bias`` Cout,
    ``offsets`` and ``modulation`` K x T.
    """
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ShapeError(f"deform_conv1d: bad ranks x{x.shape} w{weight.shape}")
    cout, cin, K = weight.shape
    C, T = x.shape
    if K % 2 == 0:
        raise ShapeError(f"deform_conv1d: kernel size must be odd, got {K}")
    if T < K:
        raise ShapeError(f"deform_conv1d: need T >= K, got T={T}, K={K}")
    if cin != C:
        raise ShapeError(f"deform_conv1d: input has {C} channels, weight expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"deform_conv1d: bias shape {bias.shape}, expected ({cout},)")
    if offsets.shape != (K, T) or modulation.shape != (K, T):
        raise ShapeError(
            f"deform_conv1d: offsets {offsets.shape} / modulation {modulation.shape}, "
            f"expected ({K}, {T})"
        )

    left, frac = _sample_positions(offsets.data, T)
    right = left + 1
    lvalid = (left >= 0) & (left < T)
    rvalid = (right >= 0) & (right < T)
    xl = np.where(lvalid, x.data[:, np.clip(left, 0, T - 1)], 0.0)  # C x K x T
    xr = np.where(rvalid, x.data[:, np.clip(right, 0, T - 1)], 0.0)
    sampled = (1.0 - frac) * xl + frac * xr
    m = modulation.data
    cols = sampled * m  # C x K x T
    w2 = weight.data.reshape(cout, cin * K)
    cols2 = cols.reshape(cin * K, T)
    out_data = w2 @ cols2 + bias.data[:, None]

    def bw(g):
        gw = (g @ cols2.T).reshape(cout, cin, K)
        gb = g.sum(axis=1)
        gcols = (w2.T @ g).reshape(cin, K, T)
        gm = (gcols * sampled).sum(axis=0)
        gs = gcols * m
        goff = (gs * (xr - xl)).sum(axis=0)
        gx = np.zeros((C, T))
        wl = np.where(lvalid, 1.0 - frac, 0.0)
        wr = np.where(rvalid, frac, 0.0)
        li = np.clip(left, 0, T - 1).reshape(-1)
        ri = np.clip(right, 0, T - 1).reshape(-1)
        gs2 = gs.reshape(C, -1)
        for c in range(C):
            gx[c] += np.bincount(li, weights=gs2[c] * wl.reshape(-1), minlength=T)
            gx[c] += np.bincount(ri, weights=gs2[c] * wr.reshape(-1), minlength=T)
        return gx, gw, gb, goff, gm

    return Tensor._from_op(out_data, (x, weight, bias, offsets, modulation), bw)


@dataclass
class DeformConvParams:
    """Main kernel plus the two conv branches that predict offsets and modulation."""

    weight: Tensor
    bias: Tensor
    offset_weight: Tensor
    offset_bias: Tensor
    mod_weight: Tensor
    mod_bias: Tensor

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def init(cls, cin: int, cout: int, kernel_size: int, rng: np.random.Generator) -> DeformConvParams:
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        std = np.sqrt(2.0 / (cin * kernel_size))
        K = kernel_size
        return cls(
            weight=parameter(rng.standard_normal((cout, cin, K)) * std),
            bias=parameter(np.zeros(cout)),
            # zero init: no offset, modulation sigmoid(0) = 0.5
            offset_weight=parameter(np.zeros((K, cin, 3))),
            offset_bias=parameter(np.zeros(K)),
            mod_weight=parameter(np.zeros((K, cin, 3))),
            mod_bias=parameter(np.zeros(K)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "weight": self.weight,
            "bias": self.bias,
            "offset_weight": self.offset_weight,
            "offset_bias": self.offset_bias,
            "mod_weight": self.mod_weight,
            "mod_bias": self.mod_bias,
        }


def predict_offsets(x: Tensor, params: DeformConvParams) -> tuple[Tensor, Tensor]:
    """Per-location offsets (K x T) and sigmoid modulation (K x T)."""
    offsets = conv1d(x, params.offset_weight, params.offset_bias)
    modulation = sigmoid(conv1d(x, params.mod_weight, params.mod_bias))
    return offsets, modulation


def deform_layer(x: Tensor, params: DeformConvParams) -> Tensor:
    offsets, modulation = predict_offsets(x, params)
    return deform_conv1d(x, params.weight, params.bias, offsets, modulation)
