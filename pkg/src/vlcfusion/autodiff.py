"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the fusion blocks, the toy detector and its losses
need are provided. A :class:`Var` records its parents and a closure that
pushes the output gradient back to them; :meth:`Var.backward` walks the
graph in reverse topological order.

Operations whose inputs carry no gradient return a constant ``Var`` and
record nothing, so running the same code on plain arrays stays cheap.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node; a scalar output seeds with 1."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(data: np.ndarray, parents: Sequence[Var], backward: Callable[[np.ndarray], None]) -> Var:
    out = Var(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Var, Var]:
    # python scalars adopt the array operand's dtype instead of promoting it
    if not isinstance(a, (Var, np.ndarray)) and isinstance(b, (Var, np.ndarray)):
        a = np.asarray(a, dtype=np.asarray(b.data if isinstance(b, Var) else b).dtype)
    elif not isinstance(b, (Var, np.ndarray)) and isinstance(a, (Var, np.ndarray)):
        b = np.asarray(b, dtype=np.asarray(a.data if isinstance(a, Var) else a).dtype)
    return as_var(a), as_var(b)


def _send(v: Var, g: np.ndarray) -> None:
    if v.requires_grad:
        v._accumulate(g)


# -----------------------------------------------------------------------------
# elementwise
# -----------------------------------------------------------------------------


def add(a, b) -> Var:
    a, b = _pair(a, b)

    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Var:
    a, b = _pair(a, b)

    def backward(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Var:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            _send(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _send(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Sigmoid that never overflows: exp is only taken of non-positive values."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x, open_interval: bool = False) -> Var:
    """Logistic function. With ``open_interval`` saturated values are pulled
    to the nearest representable numbers inside (0, 1), so masks never
    become exactly 0 or 1 in floating point."""
    x = as_var(x)
    s = stable_sigmoid(x.data)
    if open_interval and np.issubdtype(s.dtype, np.floating):
        lo = np.finfo(s.dtype).tiny
        hi = np.nextafter(s.dtype.type(1), s.dtype.type(0))
        s = np.clip(s, lo, hi)

    def backward(g):
        _send(x, g * s * (1.0 - s))

    return _make(s, (x,), backward)


def relu(x) -> Var:
    x = as_var(x)
    mask = x.data > 0

    def backward(g):
        _send(x, g * mask)

    return _make(x.data * mask, (x,), backward)


def absolute(x) -> Var:
    x = as_var(x)
    sign = np.sign(x.data)

    def backward(g):
        _send(x, g * sign)

    return _make(np.abs(x.data), (x,), backward)


# -----------------------------------------------------------------------------
# reductions and shape ops
# -----------------------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Var:  # noqa: A001 - mirrors numpy
    x = as_var(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _send(x, np.broadcast_to(g, x.shape))

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _send(x, np.broadcast_to(g / count, x.shape))

    return _make(out, (x,), backward)


def amax(x, axis=None, keepdims: bool = False) -> Var:
    """Max reduction; the gradient is shared equally among tied maxima."""
    x = as_var(x)
    axes = _norm_axes(axis, x.ndim)
    out_k = x.data.max(axis=axes, keepdims=True)
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        hit = x.data == out_k
        _send(x, g * hit / hit.sum(axis=axes, keepdims=True))

    return _make(out, (x,), backward)


def reshape(x, shape) -> Var:
    x = as_var(x)
    src = x.shape

    def backward(g):
        _send(x, g.reshape(src))

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes) -> Var:
    x = as_var(x)
    inv = np.argsort(axes)

    def backward(g):
        _send(x, np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), backward)


def concat(xs: Iterable, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _send(x, g[tuple(idx)])

    return _make(out, xs, backward)


# -----------------------------------------------------------------------------
# linear algebra
# -----------------------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def backward(g):
        if a.requires_grad:
            _send(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _send(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None) -> Var:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    y = matmul(x, transpose(w, (1, 0)))
    return y if b is None else add(y, b)


def softmax(x, axis: int = -1) -> Var:
    x = as_var(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _send(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), backward)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Var:
    """Cross-correlation of (B, C, H, W) input with (O, C, kh, kw) kernels."""
    x, w = as_var(x), as_var(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    H, W = x.shape[2:]
    kh, kw = w.shape[2:]
    out = _kernels.conv2d_forward(x.data, w.data, stride, pad)

    def backward(g):
        if x.requires_grad:
            _send(x, _kernels.conv2d_backward_input(g, w.data, H, W, stride, pad))
        if w.requires_grad:
            _send(w, _kernels.conv2d_backward_weight(g, x.data, kh, kw, stride, pad))

    y = _make(out, (x, w), backward)
    if b is not None:
        y = add(y, reshape(b, (1, -1, 1, 1)))
    return y


# -----------------------------------------------------------------------------
# fused losses
# -----------------------------------------------------------------------------


def bce_with_logits(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Var:
    """Summed binary cross-entropy on logits, computed without overflow."""
    x = as_var(logits)
    z = x.data
    t = np.asarray(targets, dtype=z.dtype)
    wts = np.ones_like(z) if weights is None else np.asarray(weights, dtype=z.dtype)
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))) * wts

    def backward(g):
        _send(x, g * (stable_sigmoid(z) - t) * wts)

    return _make(np.asarray(loss.sum(), dtype=z.dtype), (x,), backward)


def softmax_cross_entropy(logits, labels: np.ndarray, mask: np.ndarray, axis: int = 1) -> Var:
    """Summed cross-entropy over positions where ``mask`` is set.

    ``labels`` holds integer class ids with the class axis removed.
    """
    x = as_var(logits)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    onehot = np.moveaxis(np.eye(x.shape[axis], dtype=x.dtype)[labels], -1, axis)
    m = np.expand_dims(np.asarray(mask, dtype=x.dtype), axis)
    loss = -(onehot * logp * m).sum()

    def backward(g):
        _send(x, g * (np.exp(logp) - onehot) * m)

    return _make(np.asarray(loss, dtype=x.dtype), (x,), backward)


def masked_l1(pred, target: np.ndarray, mask: np.ndarray) -> Var:
    """Summed |pred - target| where ``mask`` (broadcastable) is set."""
    x = as_var(pred)
    m = np.broadcast_to(np.asarray(mask, dtype=x.dtype), x.shape)
    d = x.data - np.asarray(target, dtype=x.dtype)
    loss = (np.abs(d) * m).sum()

    def backward(g):
        _send(x, g * np.sign(d) * m)

    return _make(np.asarray(loss, dtype=x.dtype), (x,), backward)
