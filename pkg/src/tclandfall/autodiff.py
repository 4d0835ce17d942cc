"""A small reverse-mode autodiff tensor over float64 numpy arrays.

Each operation returns a new :class:`Tensor` that remembers its operands and a
closure mapping the output gradient to operand gradients. :func:`backward`
orders the recorded graph topologically (the tape) and replays it in reverse.

There is no broadcasting: elementwise operands must have identical shapes and
biases are widened explicitly with :func:`expand`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from tclandfall.errors import ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum propagates NaN, so corrupt inputs surface as a NaN loss
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), fn, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------- shape

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (int, np.integer, slice)) and i is not Ellipsis:
            raise TypeError(f"slice: unsupported index {i!r}")
    out = a.data[index]
    if out.size == 0:
        raise ShapeError(f"slice: index {index} selects nothing from shape {a.shape}")
    src = a.shape

    def fn(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _make(np.array(out), (a,), fn, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no operands")
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax
        ):
            raise ShapeError(f"concat: shape mismatch {tensors[0].shape} vs {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, fn, "concat")


def expand(a, shape) -> Tensor:
    """Repeat ``a`` along its size-1 axes to reach ``shape`` (same rank required)."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if len(shape) != a.data.ndim or any(s != d and d != 1 for s, d in zip(shape, a.shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, d) in enumerate(zip(shape, a.shape)) if s != d)
    return _make(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
        "expand",
    )


# ---------------------------------------------------------------- reductions

def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    if axis is None:
        return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(src, float(g)),), "reduce_sum")
    ax = axis % a.data.ndim

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)

    return _make(a.data.sum(axis=ax), (a,), fn, "reduce_sum")


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis % a.data.ndim]
    return scale(reduce_sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- convolution

def conv2d(x, w, b) -> Tensor:
    """Valid cross-correlation of ``x[N,C,H,W]`` with ``w[O,C,k,k]`` plus bias ``b[O]``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError(f"conv2d: expected x[N,C,H,W], w[O,C,k,k], b[O]; got {x.shape}, {w.shape}, {b.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c or b.shape[0] != o or kh != kw:
        raise ShapeError(f"conv2d: shape mismatch x{x.shape} w{w.shape} b{b.shape}")
    if h < kh or wd < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {kh}x{kw}")
    ho, wo = h - kh + 1, wd - kw + 1
    kk = kh * kw
    # im2col in channels-last order: cols[n, y, x, (i, j), c]
    xl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, kk, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = xl[:, i:i + ho, j:j + wo, :]
    cols = cols.reshape(n * ho * wo, kk * c)
    wm = w.data.transpose(0, 2, 3, 1).reshape(o, kk * c)
    out = (cols @ wm.T + b.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gb
        dcols = (gm @ wm).reshape(n, ho, wo, kk, c)
        gxl = np.zeros((n, h, wd, c))
        for i in range(kh):
            for j in range(kw):
                gxl[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i * kw + j, :]
        return gxl.transpose(0, 3, 1, 2), gw, gb

    return _make(np.ascontiguousarray(out), (x, w, b), fn, "conv2d")


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2 over ``x[N,C,H,W]``; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2: expected x[N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2: spatial dims {h}x{w} below 2")
    h2, w2 = h // 2, w // 2
    blocks = (
        x.data[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def fn(g):
        g4 = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(g4, idx, g[..., None], axis=-1)
        gx = np.zeros(x.shape)
        gx[:, :, : 2 * h2, : 2 * w2] = (
            g4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return (gx,)

    return _make(out, (x,), fn, "maxpool2")


# ---------------------------------------------------------------- backward

def tape(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root`` in topological order (operands first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
