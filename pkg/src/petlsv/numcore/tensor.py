"""Dense tensors with a minimal reverse-mode tape.

Only the handful of operations the speaker-verification stack needs are
provided (see :mod:`petlsv.numcore.ops`).  Each operation records its parents
and a closure mapping the output gradient to parent gradients; nothing is
recorded when no parent requires a gradient or inside :func:`no_grad`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from petlsv.errors import ContractError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-d float array plus (optionally) the op that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        req = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = req
        out._parents = tuple(parents) if req else ()
        out._backward = backward if req else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from petlsv.numcore import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from petlsv.numcore import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from petlsv.numcore import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from petlsv.numcore import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from petlsv.numcore import ops

        return ops.scale(self, -1.0)

    def __truediv__(self, other):
        from petlsv.numcore import ops

        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.scale(self, 1.0 / other)

    def __matmul__(self, other):
        from petlsv.numcore import ops

        return ops.matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _toposort(root: Tensor):
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(loss: Tensor, wrt) -> list:
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

    Tensors unreachable from ``loss`` get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
    return [leaves.get(id(t), np.zeros_like(t.data)) for t in wrt]


def backward(loss: Tensor, params) -> dict:
    """Gradients keyed by name for every trainable group in ``params``.

    Frozen groups get no entry at all.
    """
    live = [g for g in params if g.trainable]
    grads = gradients(loss, [g.tensor for g in live])
    return {g.name: gr for g, gr in zip(live, grads)}
