"""Dense float64 tensors with reverse-mode automatic differentiation.

This is a deliberately small engine: it covers exactly the operations the
recovery network needs (convolution, ReLU/sigmoid, pooling, nearest
upsampling, concatenation, broadcast add/mul, sum, reshape) plus a seam
(:meth:`Tensor.from_op`) through which the optics module registers its own
linear operators.

Conventions:
  - everything is float64; gradients are float64 arrays of the same shape
  - graphs are built eagerly and live only as long as their output tensors
  - ``backward`` re-zeroes the gradients of the reachable graph and then
    accumulates fresh, so calling it twice gives identical results
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure numeric evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    ``data`` is immutable by convention while a graph referencing the tensor
    is alive; the trainer swaps in new arrays between steps. ``grad`` is the
    only slot mutated during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        """Create a graph node. ``backward`` receives the node's output
        gradient and must accumulate into the parents via ``accumulate``."""
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to ``t`` (no-op for non-grad leaves)."""
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative postorder DFS; recursion would overflow on deep unrolled graphs.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss.

    Gradients of every tensor reachable from ``loss`` are zeroed first, then
    accumulated in reverse topological order, so each node's backward runs
    exactly once per call.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    for t in order:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# -- elementwise and structural ops ----------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{opname}: operand shapes {a.data.shape} and {b.data.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor.from_op(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(-g, b.data.shape))

    return Tensor.from_op(a.data - b.data, (a, b), bwd, "sub")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        accumulate(a, -g)

    return Tensor.from_op(-a.data, (a,), bwd, "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bwd(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor.from_op(a.data * b.data, (a, b), bwd, "mul")


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def bwd(g):
        accumulate(a, np.full(a.data.shape, float(g)))

    return Tensor.from_op(np.asarray(a.data.sum()), (a,), bwd, "sum")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        accumulate(a, g.reshape(a.data.shape))

    return Tensor.from_op(a.data.reshape(shape), (a,), bwd, "reshape")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: shape {s} incompatible with {ref} off axis {axis}")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    held = tuple(parts)

    def bwd(g):
        for p, lo, hi in zip(held, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate(p, g[tuple(idx)])

    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=axis), held, bwd, "concat")


# -- nonlinearities ----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at 0 is taken to be 0."""
    mask = a.data > 0

    def bwd(g):
        accumulate(a, g * mask)

    return Tensor.from_op(np.maximum(a.data, 0.0), (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic function, output in (0, 1)."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        accumulate(a, g * out * (1.0 - out))

    return Tensor.from_op(out, (a,), bwd, "sigmoid")


# -- convolution and friends --------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B,C,Hp,Wp) -> (B,Ho,Wo,C*kh*kw), row-major over (C,kh,kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho, wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw) filters.

    Zero padding; odd kernels only. Output spatial extents follow
    floor((H + 2*padding - kh)/stride) + 1. Differentiable in x, w and b.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: input ndim {xd.ndim} and weight ndim {wd.ndim} must both be 4")
    bsz, cin, h, wid = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != weight input channels {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise UsageError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise UsageError(f"conv2d: invalid stride {stride} or padding {padding}")
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * padding}x{wid + 2 * padding} smaller than kernel {kh}x{kw}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")

    if padding:
        xp = np.zeros((bsz, cin, h + 2 * padding, wid + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + wid] = xd
    else:
        xp = xd
    cols = _im2col(xp, kh, kw, stride)
    bq, ho, wo, _ = cols.shape
    wmat = wd.reshape(cout, -1)
    out = cols.reshape(-1, wmat.shape[1]) @ wmat.T
    out = out.reshape(bq, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            accumulate(w, (gm.T @ cols.reshape(-1, wmat.shape[1])).reshape(wd.shape))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(bq, ho, wo, cin, kh, kw)
            # one big transpose-copy so the tap scatter adds contiguous blocks
            dct = np.ascontiguousarray(dcols.transpose(0, 3, 4, 5, 1, 2))
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += dct[:, :, i, j]
            accumulate(x, dxp[:, :, padding:padding + h, padding:padding + wid] if padding else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, bwd, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (B,C,H,W) -> (B,C,1,1)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got ndim {x.data.ndim}")
    h, w = x.data.shape[2:]

    def bwd(g):
        accumulate(x, np.broadcast_to(g / (h * w), x.data.shape).copy())

    return Tensor.from_op(x.data.mean(axis=(2, 3), keepdims=True), (x,), bwd, "gap")


def upsample_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of (B,C,H,W)."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected 4-d input, got ndim {x.data.ndim}")
    bsz, c, h, w = x.data.shape

    def bwd(g):
        accumulate(x, g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor.from_op(x.data.repeat(2, axis=2).repeat(2, axis=3), (x,), bwd, "upsample2x")


def downsample_block(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-2 same convolution; halves both spatial extents (must be even)."""
    h, wid = x.data.shape[2:]
    if h % 2 or wid % 2:
        raise ShapeError(f"downsample_block: spatial extents {h}x{wid} not divisible by 2")
    k = w.data.shape[2]
    return conv2d(x, w, b, stride=2, padding=(k - 1) // 2)


def upsample_block(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Nearest x2 upsampling followed by a same convolution; doubles H and W."""
    k = w.data.shape[2]
    return conv2d(upsample_nearest(x), w, b, stride=1, padding=(k - 1) // 2)
