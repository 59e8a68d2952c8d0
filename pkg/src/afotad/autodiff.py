"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.  ``backward``
topologically sorts the graph reachable from a scalar loss and runs those
closures once each, in reverse order.

Only the handful of operations the detector needs are provided.  There is no
broadcasting except against 0-d tensors, which is how scalar parameters such
as the decode exponent enter the graph.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf reaches a graph boundary."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor input")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.node_id = next(_ids)
        out.name = None
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the functions below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Graph traversal


class GradGraph:
    """Operations reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> GradGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; recursion depth would otherwise scale with graph depth
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor) -> None:
        if root.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {root.shape}")
        _check_finite(root.data, "loss")
        pending: dict[int, np.ndarray] = {root.node_id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    """
    GradGraph.from_root(loss).backward(loss)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def _same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out_data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor._from_op(ad * bd, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "div")
    ad, bd = a.data, b.data
    out_data = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out_data / bd, b.shape)

    return Tensor._from_op(out_data, (a, b), bw)


def scale(t: Tensor, a: float | Tensor) -> Tensor:
    """Multiply by a constant float or by a 0-d tensor."""
    if isinstance(a, Tensor):
        if a.data.ndim != 0:
            raise ShapeError(f"scale factor must be 0-d, got shape {a.shape}")
        return mul(t, a)
    a = float(a)
    return Tensor._from_op(t.data * a, (t,), lambda g: (g * a,))


def exp(t: Tensor) -> Tensor:
    out_data = np.exp(t.data)
    return Tensor._from_op(out_data, (t,), lambda g: (g * out_data,))


def log(t: Tensor) -> Tensor:
    d = t.data
    return Tensor._from_op(np.log(d), (t,), lambda g: (g / d,))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0.0  # subgradient at 0 is 0
    return Tensor._from_op(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def sigmoid(t: Tensor) -> Tensor:
    out_data = 0.5 * (1.0 + np.tanh(0.5 * t.data))
    return Tensor._from_op(out_data, (t,), lambda g: (g * out_data * (1.0 - out_data),))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    _same_or_scalar(a, b, "minimum")
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._from_op(np.where(pick_a, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# Reductions and indexing


def sum(t: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = t.shape
    return Tensor._from_op(np.asarray(t.data.sum()), (t,), lambda g: (np.broadcast_to(g, shape),))


def mean(t: Tensor) -> Tensor:
    n = t.size
    shape = t.shape
    return Tensor._from_op(
        np.asarray(t.data.mean()), (t,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def take(t: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing, differentiable by scatter-add."""
    out_data = t.data[idx]
    shape = t.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(out_data), (t,), bw)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    shapes = {r.shape for r in rows}
    if len(shapes) != 1:
        raise ShapeError(f"stack_rows: mixed shapes {sorted(shapes)}")

    def bw(g):
        return tuple(g[i] for i in range(len(rows)))

    return Tensor._from_op(np.stack([r.data for r in rows]), tuple(rows), bw)


# ---------------------------------------------------------------------------
# Temporal operators


def _check_ct(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op}: expected a C x T tensor, got shape {t.shape}")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Length-preserving dilated cross-correlation, zero padded.

    ``x`` is Cin x T, ``weight`` Cout x Cin x K with K odd, ``bias`` Cout.
    """
    _check_ct(x, "conv1d")
    if weight.data.ndim != 3:
        raise ShapeError(f"conv1d: weight must be Cout x Cin x K, got {weight.shape}")
    cout, cin, k = weight.shape
    if cin != x.shape[0]:
        raise ShapeError(f"conv1d: input has {x.shape[0]} channels, weight expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {bias.shape}, expected ({cout},)")
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    if dilation < 1:
        raise ValueError(f"conv1d: dilation must be >= 1, got {dilation}")

    T = x.shape[1]
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    # cols[c, j, t] = x[c, t + (j - (k-1)/2) * dilation]
    cols = np.stack([xp[:, j * dilation : j * dilation + T] for j in range(k)], axis=1)
    w2 = weight.data.reshape(cout, cin * k)
    cols2 = cols.reshape(cin * k, T)
    out_data = w2 @ cols2 + bias.data[:, None]

    def bw(g):
        gw = (g @ cols2.T).reshape(cout, cin, k)
        gb = g.sum(axis=1)
        gcols = (w2.T @ g).reshape(cin, k, T)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j * dilation : j * dilation + T] += gcols[:, j]
        return gxp[:, pad : pad + T], gw, gb

    return Tensor._from_op(out_data, (x, weight, bias), bw)


def maxpool1d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping temporal max-pool; ties route gradient to the first index."""
    _check_ct(x, "maxpool1d")
    if kernel != 2 or stride != 2:
        raise ValueError("maxpool1d supports kernel=2, stride=2 only")
    C, T = x.shape
    if T % 2:
        raise ShapeError(f"maxpool1d: temporal length must be even, got {T}")
    win = x.data.reshape(C, T // 2, 2)
    arg = np.argmax(win, axis=2)
    out_data = np.take_along_axis(win, arg[..., None], axis=2)[..., 0]

    def bw(g):
        gw = np.zeros((C, T // 2, 2))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=2)
        return (gw.reshape(C, T),)

    return Tensor._from_op(out_data, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Column-wise softmax of a C x T tensor."""
    _check_ct(x, "softmax")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return Tensor._from_op(p, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    """Column-wise log-softmax of a C x T tensor."""
    _check_ct(x, "log_softmax")
    z = x.data - x.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0, keepdims=True))
    out_data = z - lse
    p = np.exp(out_data)

    def bw(g):
        return (g - p * g.sum(axis=0, keepdims=True),)

    return Tensor._from_op(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# Finite-difference checking


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
    max_coords: int | None = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to an output tensor; a non-scalar output is
    contracted with a fixed random cotangent so that every output element is
    exercised.  Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    ``max_coords`` caps the number of coordinates probed per input (chosen at
    random) for large inputs.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = np.random.default_rng(seed)
    probe = f(*inputs)
    cot = None if probe.data.ndim == 0 else rng.standard_normal(probe.shape)

    def scalar_out() -> Tensor:
        out = f(*inputs)
        return out if cot is None else sum(mul(out, Tensor(cot)))

    for t in inputs:
        t.zero_grad()
    backward(scalar_out())

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar_out().item()
            flat[i] = orig - eps
            fm = scalar_out().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    for t in inputs:
        t.zero_grad()
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
