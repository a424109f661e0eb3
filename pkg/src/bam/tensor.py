"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tape` records every operation whose inputs live on it. Tensors
without a tape are constants: operations on constants run eagerly and
record nothing, which is how frozen teachers are evaluated.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "index", "requires_grad")

    def __init__(self, data, tape=None, index=-1, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tape is not None})"


class Tape:
    """Ordered record of executed operations.

    Entry ``i`` holds ``(inputs, backward_fn)`` for the tensor with
    ``index == i``. Leaves have ``backward_fn is None``.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data, requires_grad=True):
        t = Tensor(data, self, len(self.nodes), requires_grad)
        self.nodes.append(((), None))
        return t

    def record(self, out, inputs, backward_fn):
        t = Tensor(out, self, len(self.nodes), any(x.requires_grad for x in inputs))
        self.nodes.append((inputs, backward_fn))
        return t


def constant(data):
    return Tensor(data)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _emit(out, inputs, backward_fn):
    tape = _tape_of(*inputs)
    if tape is None or not any(x.requires_grad for x in inputs):
        return Tensor(out)
    return tape.record(out, inputs, backward_fn)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), back)


def add_bias(x, b):
    """Add a length-n bias to every row of an m x n tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {b.shape}")

    def back(g):
        return g, g.sum(axis=0)

    return _emit(x.data + b.data, (x, b), back)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def tanh(x):
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax_rows(x):
    z = x.data
    if z.ndim == 1:
        z = z[None, :]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    y = y.reshape(x.shape)

    def back(g):
        gy = g * y
        return (gy - y * gy.sum(axis=-1, keepdims=True),)

    return _emit(y, (x,), back)


def take_rows(x, rows):
    """Gather rows of a matrix; gradient scatters back with accumulation."""
    rows = np.asarray(rows, dtype=np.intp)
    n = x.shape[0]

    def back(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, rows, g)
        return (out,)

    return _emit(x.data[rows], (x,), back)


def reshape(x, shape):
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def total(x):
    """Sum of all entries, as a scalar tensor."""
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def cross_entropy_soft(target, pred):
    """Summed ``-sum_k target_k log(pred_k)`` over rows.

    ``target`` is a constant array (vector or row-stacked matrix) and
    ``pred`` a tensor of the same shape. Predictions are floored at
    ``PROB_FLOOR`` before the log; the floor passes no gradient.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"cross_entropy_soft length mismatch: {t.shape} vs {pred.shape}")
    p = pred.data
    clamped = p < PROB_FLOOR
    loss = -np.sum(t * np.log(np.maximum(p, PROB_FLOOR)))

    def back(g):
        d = np.where(clamped, 0.0, -t / np.where(clamped, 1.0, p))
        return (float(g) * d,)

    return _emit(np.array(loss), (pred,), back)


def squared_error(target, pred):
    """Summed ``(target - pred)**2`` with a constant target."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"squared_error shape mismatch: {t.shape} vs {pred.shape}")
    diff = pred.data - t
    return _emit(np.array(np.sum(diff * diff)), (pred,), lambda g: (2.0 * float(g) * diff,))


def backward(loss, tape=None):
    """Propagate adjoints from a scalar ``loss``.

    Returns a dict mapping tape index to gradient for every leaf with
    ``requires_grad`` that the loss depends on. Leaves the loss does not
    reach are absent.
    """
    tape = tape if tape is not None else loss.tape
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None or loss.tape is not tape:
        return {}
    adj = {loss.index: np.ones_like(loss.data)}
    grads = {}
    for i in range(loss.index, -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        inputs, fn = tape.nodes[i]
        if fn is None:
            grads[i] = g
            continue
        for x, gx in zip(inputs, fn(g)):
            if x.tape is not tape or not x.requires_grad:
                continue
            prev = adj.get(x.index)
            adj[x.index] = gx if prev is None else prev + gx
    return grads
