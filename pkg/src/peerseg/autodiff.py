"""Minimal reverse-mode autodiff over float64 numpy arrays.

Each op builds a node holding its inputs and a closure that pushes the
output adjoint back onto them; backward() walks the recorded graph in
reverse topological order.  Plain numpy arrays entering an op are wrapped
as constants, so anything meant to be gradient-free (targets, prototypes,
detached activations) simply stays a numpy array.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "_parents", "_push")

    def __init__(self, data, requires_grad=False, _parents=(), _push=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._push = _push
        self.needs_grad = requires_grad or any(p.needs_grad for p in _parents)

    # -- graph walk ---------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        if not self.needs_grad:
            raise ValueError("loss does not depend on any differentiable parameter")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.needs_grad and id(p) not in seen:
                    stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._push is not None:
                node._push(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- conveniences -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.needs_grad else 'no'})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if not t.needs_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum an adjoint down to the shape numpy broadcast it up from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# -- primitive ops ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def push(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _push=push)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def push(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _push=push)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def push(g):
        if a.needs_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.needs_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _push=push)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def push(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, _parents=(a, b), _push=push)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    out_data = a.data @ b.data

    def push(g):
        if a.needs_grad:
            _accum(a, g @ b.data.T)
        if b.needs_grad:
            _accum(b, a.data.T @ g)

    return Tensor(out_data, _parents=(a, b), _push=push)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def push(g):
        _accum(a, g * out_data)

    return Tensor(out_data, _parents=(a,), _push=push)


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def push(g):
        _accum(a, g / a.data)

    return Tensor(out_data, _parents=(a,), _push=push)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def push(g):
        _accum(a, g * 0.5 / out_data)

    return Tensor(out_data, _parents=(a,), _push=push)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def push(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return Tensor(out_data, _parents=(a,), _push=push)


def mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def leaky_relu(a, slope=0.01) -> Tensor:
    a = _wrap(a)
    factor = np.where(a.data >= 0, 1.0, slope)
    out_data = a.data * factor

    def push(g):
        _accum(a, g * factor)

    return Tensor(out_data, _parents=(a,), _push=push)


def take_rows(a, idx) -> Tensor:
    """Gather rows (leading-axis entries) by an integer index array."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def push(g):
        if not a.needs_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accum(a, buf)

    return Tensor(out_data, _parents=(a,), _push=push)


def take_at(a, rows, cols) -> Tensor:
    """out[k] = a[rows[k], cols[k]] for a 2-d operand."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out_data = a.data[rows, cols]

    def push(g):
        if not a.needs_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, cols), g)
        _accum(a, buf)

    return Tensor(out_data, _parents=(a,), _push=push)


def take_per_row(a, cols) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-d operand."""
    a = _wrap(a)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, cols]

    def push(g):
        if not a.needs_grad:
            return
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, cols), g)
        _accum(a, buf)

    return Tensor(out_data, _parents=(a,), _push=push)


def concat_rows(parts) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def push(g):
        off = 0
        for p, s in zip(parts, sizes):
            _accum(p, g[off:off + s])
            off += s

    return Tensor(out_data, _parents=tuple(parts), _push=push)


def detached_sign_abs(a) -> Tensor:
    """|a| with the sign taken from the forward value (constant in backward)."""
    a = _wrap(a)
    sign = np.sign(a.data)
    return mul(a, sign)


def normalize_rows(a, eps=1e-12) -> Tensor:
    """Rows scaled to unit Euclidean length."""
    sq = tsum(mul(a, a), axis=1, keepdims=True)
    return div(a, sqrt(add(sq, eps)))
