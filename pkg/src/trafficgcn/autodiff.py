"""Minimal reverse-mode automatic differentiation on NumPy arrays.

Just enough machinery for the interaction-graph classifier: a ``Tensor``
wraps a float64 ndarray, ops record parents and a backward closure, and
``backward`` walks the tape. Gradients are exact up to floating point; the
test suite verifies every op and the full model against central finite
differences.

Tape recording is skipped entirely inside ``no_grad()`` and for subgraphs
that do not depend on any ``requires_grad`` leaf, so evaluation-mode
forward passes are plain vectorized NumPy with a thin wrapper.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True

# When set, every relu() call appends its input array here. grad_check uses
# this to detect finite-difference evaluations that straddle a ReLU kink.
_RELU_TRACE: list[np.ndarray] | None = None


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def relu_trace(sink: list):
    """Record the preactivation array of every relu() into ``sink``."""
    global _RELU_TRACE
    prev = _RELU_TRACE
    _RELU_TRACE = sink
    try:
        yield sink
    finally:
        _RELU_TRACE = prev


class Tensor:
    """A float64 ndarray plus the tape bookkeeping needed for backward."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped on the fly
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    """A trainable leaf."""
    return Tensor(value, requires_grad=True)


def _node(value: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    """Matrix product; batched on leading axes, operands must be >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def bwd(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return _node(a.value @ b.value, (a, b), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(a.value.copy())
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    v = np.exp(a.value)
    return _node(v, (a,), lambda g: (g * v,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    v = np.sqrt(a.value)
    return _node(v, (a,), lambda g: (g * 0.5 / v,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    v = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(ax % a.value.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, a.value.shape),)

    return _node(v, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in ts]

    def bwd(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.value for t in ts], axis=axis), tuple(ts), bwd)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), bwd)


def time_shift(a, offset: int) -> Tensor:
    """y[t] = x[t + offset] along axis 0, zero outside the valid range."""
    a = as_tensor(a)
    n = a.value.shape[0]

    def shift(x, off):
        out = np.zeros_like(x)
        if off >= 0:
            if off < n:
                out[: n - off] = x[off:]
        else:
            if -off < n:
                out[-off:] = x[: n + off]
        return out

    return _node(shift(a.value, offset), (a,), lambda g: (shift(g, -offset),))


def backward(root: Tensor) -> None:
    """Accumulate gradients of ``root`` (summed to a scalar) into the tape leaves."""
    if root.grad is None:
        root.grad = np.ones_like(root.value)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    for node in reversed(topo):
        if node._bwd is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._bwd(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
