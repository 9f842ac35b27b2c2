"""Reverse-mode automatic differentiation over numpy arrays.

Only the operations needed by the three agents are provided. Every op
records its parents and a closure that pushes the output gradient back to
them; :func:`backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from rgtom.errors import StateError


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev, _GRAD_ENABLED = _GRAD_ENABLED, False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), name: str | None = None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _prev=tuple(parents) if req else ())
    if req:
        out._backward = backward
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

    return _node(out_data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data))
        if b.requires_grad:
            if a.data.ndim == 1:
                b._accumulate(np.outer(a.data, g))
            else:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - y * y))

    return _node(y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def bw(g):
        x._accumulate(g * y * (1.0 - y))

    return _node(y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bw(g):
        x._accumulate(g * y)

    return _node(y, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g / x.data)

    return _node(np.log(x.data), (x,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(y, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(x.data, -1, -2), (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _node(x.data[idx], (x,), bw)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _node(table.data[ids], (table,), bw)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[..., index]`` along the last axis, one entry per leading row."""
    index = np.asarray(index, dtype=np.int64)
    sel = np.expand_dims(index, -1)
    y = np.take_along_axis(x.data, sel, axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, sel, np.expand_dims(g, -1), axis=-1)
        x._accumulate(full)

    return _node(y, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            if x.requires_grad:
                x._accumulate(part)

    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        for i, x in enumerate(xs):
            if x.requires_grad:
                x._accumulate(np.take(g, i, axis=axis))

    return _node(np.stack([x.data for x in xs], axis=axis), xs, bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _node(np.where(take_a, a.data, b.data), (a, b), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        x._accumulate(np.where(inside, g, 0.0))

    return _node(np.clip(x.data, lo, hi), (x,), bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _node(np.where(cond, a.data, b.data), (a, b), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        x._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), bw)


def softmax_t(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _node(p, (x,), bw)


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    ``params``, when given, get zero gradients if the loss does not depend
    on them. Raises :class:`StateError` when ``loss`` carries no recorded
    computation.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise StateError("backward called without a recorded forward pass")
    if loss.data.size != 1:
        raise StateError("backward needs a scalar loss")
    order = _topo(loss)
    for node in order:
        if node._prev:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._prev:
            node.grad = None
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
