"""Minimal reverse-mode autodiff over numpy arrays.

Just enough ops for affine stacks, the ragged neighbor attention, softmax
heads and Gaussian policy math. Values are computed eagerly; a backward
closure per node replays the chain rule. ``no_grad()`` switches recording
off so rollouts pay no tape cost. Gradient correctness is pinned by the
finite-difference harness, not by construction.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "parents", "bwd", "requires_grad")

    def __init__(self, value, parents=(), bwd=None, requires_grad=False):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.grad = None
        self.parents = parents
        self.bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def constant(value) -> Tensor:
    return Tensor(value)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, parents, bwd) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(value, parents=parents, bwd=bwd)
    return Tensor(value)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor):
    """Accumulate gradients of a scalar root into every reachable node."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.bwd is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.bwd(node.grad)):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.ascontiguousarray(g)
            else:
                parent.grad = parent.grad + g


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value

    def bwd(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value

    def bwd(g):
        return _unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value

    def bwd(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _record(out, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    return _record(a.value * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def square(a) -> Tensor:
    a = _wrap(a)
    return _record(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value @ b.value

    def bwd(g):
        return g @ b.value.T, a.value.T @ g

    return _record(out, (a, b), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    out = np.clip(a.value, lo, hi)
    mask = (a.value >= lo) & (a.value <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    take_a = a.value <= b.value
    out = np.where(take_a, a.value, b.value)

    def bwd(g):
        return (
            _unbroadcast(g * take_a, a.value.shape),
            _unbroadcast(g * ~take_a, b.value.shape),
        )

    return _record(out, (a, b), bwd)


# -- reductions and shaping ---------------------------------------------------

def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.value.size
    return _record(
        np.asarray(a.value.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.value.shape),),
    )


def total(a) -> Tensor:
    a = _wrap(a)
    return _record(
        np.asarray(a.value.sum()),
        (a,),
        lambda g: (np.broadcast_to(g, a.value.shape),),
    )


def sum_axis(a, axis: int) -> Tensor:
    a = _wrap(a)
    out = a.value.sum(axis=axis)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape),)

    return _record(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _record(
        a.value.reshape(shape), (a,), lambda g: (g.reshape(a.value.shape),)
    )


def transpose(a) -> Tensor:
    a = _wrap(a)
    return _record(a.value.T, (a,), lambda g: (g.T,))


def slice_cols(a, lo: int, hi: int) -> Tensor:
    a = _wrap(a)
    out = a.value[:, lo:hi]

    def bwd(g):
        full = np.zeros_like(a.value)
        full[:, lo:hi] = g
        return (full,)

    return _record(out, (a,), bwd)


def concat_cols(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = np.concatenate([a.value, b.value], axis=1)
    na = a.value.shape[1]

    def bwd(g):
        return g[:, :na], g[:, na:]

    return _record(out, (a, b), bwd)


def concat_rows(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = np.concatenate([a.value, b.value], axis=0)
    na = a.value.shape[0]

    def bwd(g):
        return g[:na], g[na:]

    return _record(out, (a, b), bwd)


def scatter_matmul(base, rows, idx, w) -> Tensor:
    """(base with ``rows`` written at unique ``idx``) @ w.

    The non-``idx`` rows of ``base`` are constants, so the backward pass
    only propagates into the written rows; this is the hot path for
    projecting message rows where neighbor rows carry no gradient.
    """
    rows, w = _wrap(rows), _wrap(w)
    idx = np.asarray(idx)
    scattered = np.array(base, copy=True)
    scattered[idx] = rows.value
    out = scattered @ w.value

    def bwd(g):
        return g[idx] @ w.value.T, scattered.T @ g

    return _record(out, (rows, w), bwd)


def take_rows(a, idx) -> Tensor:
    """Gather rows; ``idx`` must not repeat (backward writes, not adds)."""
    a = _wrap(a)
    idx = np.asarray(idx)
    out = a.value[idx]

    def bwd(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        return (full,)

    return _record(out, (a,), bwd)


def scatter_rows(base, rows, idx) -> Tensor:
    """Constant row matrix with tensor rows written at unique positions."""
    rows = _wrap(rows)
    out = np.array(base, copy=True)
    idx = np.asarray(idx)
    out[idx] = rows.value
    return _record(out, (rows,), lambda g: (g[idx],))


def softmax_rows(a) -> Tensor:
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (a,), bwd)


def log_softmax_rows(a) -> Tensor:
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), bwd)


def detach(a) -> Tensor:
    a = _wrap(a)
    return Tensor(a.value)


def attention(q, k, v, offsets, att_scale: float) -> Tensor:
    """Ragged multi-head attention; rows [offsets[b], offsets[b+1]) serve query b."""
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    out, weights = kernels.attention_forward(
        np.ascontiguousarray(q.value),
        np.ascontiguousarray(k.value),
        np.ascontiguousarray(v.value),
        offsets,
        att_scale,
    )

    def bwd(g):
        return kernels.attention_backward(
            np.ascontiguousarray(g), q.value, k.value, v.value,
            offsets, weights, att_scale,
        )

    return _record(out, (q, k, v), bwd)
