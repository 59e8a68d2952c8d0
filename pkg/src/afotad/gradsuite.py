"""Finite-difference checks over every differentiable operator.

Each case builder draws a random input set that stays clear of the
non-differentiable points of its operator (ReLU at zero, ties in min and
max-pool, integer sampling positions in the deformable conv), so that a
central difference with eps = 1e-5 is a valid reference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, parameter
from .deformconv import deform_conv1d
from .rfam import HeadOutput
from .training import GroundTruthInstance, assign_targets, iou_loss, joint_loss

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _signed(rng, shape, lo=0.1, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _binary(op):
    def build(rng):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 7)))
        a, b = parameter(rng.standard_normal(shape)), parameter(rng.standard_normal(shape))
        return op, [a, b]
    return build


def _unary(op, sample=None):
    def build(rng):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 7)))
        x = sample(rng, shape) if sample else rng.standard_normal(shape)
        return op, [parameter(x)]
    return build


def _div(rng):
    shape = (2, int(rng.integers(2, 7)))
    return ad.div, [parameter(rng.standard_normal(shape)), parameter(_signed(rng, shape, 0.5, 2.0))]


def _minimum(rng):
    shape = (2, int(rng.integers(2, 7)))
    a = rng.standard_normal(shape)
    return ad.minimum, [parameter(a), parameter(a + _signed(rng, shape, 0.05, 1.0))]


def _scale_tensor(rng):
    x = parameter(rng.standard_normal((2, 5)))
    return ad.scale, [x, parameter(np.asarray(rng.standard_normal()))]


def _take(rng):
    n = int(rng.integers(3, 9))
    idx = rng.integers(0, n, size=int(rng.integers(1, 6)))  # repeats exercise scatter-add
    return (lambda t: ad.take(t, idx)), [parameter(rng.standard_normal(n))]


def _stack(rng):
    rows = [parameter(rng.standard_normal(4)) for _ in range(3)]
    return (lambda *r: ad.stack_rows(r)), rows


def _conv(dilation):
    def build(rng):
        cin, cout, K = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3, 5]))
        T = int(rng.integers(K, 12))
        x = parameter(rng.standard_normal((cin, T)))
        w = parameter(rng.standard_normal((cout, cin, K)))
        b = parameter(rng.standard_normal(cout))
        return (lambda x, w, b: ad.conv1d(x, w, b, dilation=dilation)), [x, w, b]
    return build


def _maxpool(rng):
    C, T = int(rng.integers(1, 4)), 2 * int(rng.integers(1, 6))
    # distinct values per pair, separated by >= 0.05
    base = rng.standard_normal((C, T))
    base[:, 1::2] = base[:, ::2] + _signed(rng, (C, T // 2), 0.05, 1.0)
    return ad.maxpool1d, [parameter(base)]


def _softmax(op):
    def build(rng):
        return op, [parameter(rng.standard_normal((int(rng.integers(2, 5)), int(rng.integers(1, 6)))) * 2)]
    return build


def _deform(rng):
    cin, cout, K = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.choice([1, 3]))
    T = int(rng.integers(max(K, 3), 10))
    x = parameter(rng.standard_normal((cin, T)))
    w = parameter(rng.standard_normal((cout, cin, K)))
    b = parameter(rng.standard_normal(cout))
    # fractional parts stay away from the interpolation kinks at integers
    off = rng.integers(-2, 3, size=(K, T)) + rng.uniform(0.05, 0.95, size=(K, T))
    mod = rng.uniform(0.1, 1.0, size=(K, T))
    return deform_conv1d, [x, w, b, parameter(off), parameter(mod)]


def _iou(rng):
    n = int(rng.integers(1, 8))
    lt, rt = rng.uniform(0.5, 5.0, n), rng.uniform(0.5, 5.0, n)
    l = lt * rng.choice([0.5, 1.5], n) + rng.uniform(-0.2, 0.2, n)
    r = rt * rng.choice([0.5, 1.5], n) + rng.uniform(-0.2, 0.2, n)
    return (lambda l, r: iou_loss((l, r), (lt, rt))), [parameter(l), parameter(r)]


def _joint(rng):
    C, T = int(rng.integers(2, 5)), int(rng.integers(8, 17))
    gts = []
    for _ in range(int(rng.integers(1, 4))):
        s = float(rng.uniform(-2, T - 2))
        gts.append(GroundTruthInstance(int(rng.integers(1, C)), s, s + float(rng.uniform(1.5, 8))))
    gts.sort(key=lambda g: g.start)
    tm = assign_targets(T, gts)
    if tm.num_pos == 0:
        tm = assign_targets(T, [GroundTruthInstance(1, 0.2, T - 0.3)])
    alpha = float(rng.uniform(0.6, 1.4))
    # raw offsets whose decoded extents differ from the targets by >= 10%
    lt = np.where(tm.left > 0, tm.left, 1.0)
    rt = np.where(tm.right > 0, tm.right, 1.0)
    lp = np.log(lt * rng.choice([0.6, 1.5], T)) / alpha
    rp = np.log(rt * rng.choice([0.6, 1.5], T)) / alpha
    beta = float(rng.uniform(0.5, 2.0))

    def f(logits, left, right, a):
        return joint_loss(HeadOutput(logits, left, right), a, tm, beta).total

    return f, [parameter(rng.standard_normal((C, T))), parameter(lp), parameter(rp),
               parameter(np.asarray(alpha))]


@dataclass(frozen=True)
class OpSpec:
    name: str
    build: Builder
    linear: bool = False


OPS: tuple[OpSpec, ...] = (
    OpSpec("add", _binary(ad.add), linear=True),
    OpSpec("sub", _binary(ad.sub), linear=True),
    OpSpec("mul", _binary(ad.mul)),
    OpSpec("div", _div),
    OpSpec("scale", _unary(lambda t: ad.scale(t, -1.7)), linear=True),
    OpSpec("scale_tensor", _scale_tensor),
    OpSpec("exp", _unary(ad.exp)),
    OpSpec("log", _unary(ad.log, lambda rng, s: rng.uniform(0.3, 3.0, s))),
    OpSpec("relu", _unary(ad.relu, _signed)),
    OpSpec("sigmoid", _unary(ad.sigmoid)),
    OpSpec("minimum", _minimum),
    OpSpec("sum", _unary(ad.sum), linear=True),
    OpSpec("mean", _unary(ad.mean), linear=True),
    OpSpec("take", _take, linear=True),
    OpSpec("stack_rows", _stack, linear=True),
    OpSpec("conv1d", _conv(1)),
    OpSpec("conv1d_dilated", _conv(2)),
    OpSpec("maxpool1d", _maxpool),
    OpSpec("softmax", _softmax(ad.softmax)),
    OpSpec("log_softmax", _softmax(ad.log_softmax)),
    OpSpec("deform_conv1d", _deform),
    OpSpec("iou_loss", _iou),
    OpSpec("joint_loss", _joint),
)
OP_NAMES = tuple(o.name for o in OPS)


def flip_sign(t: Tensor) -> Tensor:
    """Identity in the forward pass, negated gradient in the backward pass."""
    return Tensor._from_op(t.data.copy(), (t,), lambda g: (-g,))


@dataclass
class OpResult:
    name: str
    cases: int
    max_error: float
    worst_seed: int
    seconds: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@dataclass
class SuiteReport:
    results: list[OpResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "ok  " if r.passed else "FAIL"
            out.append(f"{status} {r.name:<16} cases={r.cases:<4d} max_rel_err={r.max_error:.3e} "
                       f"worst_seed={r.worst_seed} ({r.seconds:.2f}s)")
        return out


def run_suite(
    cases: int = 100, tolerance: float = 1e-4, seed: int = 0, eps: float = 1e-5,
    ops: tuple[str, ...] | None = None, mutate: str | None = None,
) -> SuiteReport:
    """Check every selected op on ``cases`` random input sets.

    ``mutate`` names an op whose gradient is deliberately negated, to show the
    suite catches a broken backward pass.
    """
    selected = [o for o in OPS if ops is None or o.name in ops]
    unknown = set(ops or ()) - set(OP_NAMES)
    if unknown:
        raise ValueError(f"unknown ops: {sorted(unknown)}")
    report = SuiteReport()
    for spec in selected:
        k = OP_NAMES.index(spec.name)
        t0 = time.perf_counter()
        worst, worst_seed = 0.0, -1
        for i in range(cases):
            case_seed = seed * 1_000_003 + k * 10_007 + i
            f, inputs = spec.build(np.random.default_rng(case_seed))
            if spec.name == mutate:
                f = (lambda g: lambda *xs: flip_sign(g(*xs)))(f)
            err = grad_check(f, inputs, eps=eps, seed=case_seed)
            if err > worst or worst_seed < 0:
                worst, worst_seed = err, case_seed
        report.results.append(OpResult(spec.name, cases, worst, worst_seed,
                                       time.perf_counter() - t0, tolerance))
    return report
