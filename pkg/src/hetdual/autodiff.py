"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the scene-graph model needs are provided. Every tensor
is float64; gradients accumulate in ``Tensor.grad`` after ``backward``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    # -- graph bookkeeping -------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate gradients from this tensor to every ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return _result(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def back(g):
            a._accumulate(-g)

        return _result(-a.data, (a,), back)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return _result(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return _result(a.data / b.data, (a, b), back)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data))
            if b.requires_grad:
                if a.data.ndim == 1:
                    b._accumulate(np.outer(a.data, g))
                else:
                    b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

        return _result(a.data @ b.data, (a, b), back)

    # -- elementwise ---------------------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0

        def back(g):
            a._accumulate(g * mask)

        return _result(np.where(mask, a.data, 0.0), (a,), back)

    def exp(self):
        a = self
        out = np.exp(a.data)

        def back(g):
            a._accumulate(g * out)

        return _result(out, (a,), back)

    def log(self):
        a = self

        def back(g):
            a._accumulate(g / a.data)

        return _result(np.log(a.data), (a,), back)

    def sigmoid(self):
        a = self
        out = 1.0 / (1.0 + np.exp(-a.data))

        def back(g):
            a._accumulate(g * out * (1.0 - out))

        return _result(out, (a,), back)

    def clip(self, lo, hi):
        a = self
        inside = (a.data >= lo) & (a.data <= hi)

        def back(g):
            a._accumulate(g * inside)

        return _result(np.clip(a.data, lo, hi), (a,), back)

    # -- reductions and indexing --------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape))

        return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def take(self, index):
        """Row gather along axis 0."""
        a = self
        index = np.asarray(index, dtype=np.int64)

        def back(g):
            a._accumulate(_scatter_rows(g, index, a.shape[0]))

        return _result(a.data[index], (a,), back)

    def reshape(self, *shape):
        a = self

        def back(g):
            a._accumulate(g.reshape(a.shape))

        return _result(a.data.reshape(*shape), (a,), back)

    @property
    def T(self):
        a = self

        def back(g):
            a._accumulate(g.T)

        return _result(a.data.T, (a,), back)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, back):
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=back)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _scatter_rows(values, index, n_rows):
    # Sparse-matrix accumulation sums each output row in ascending source order,
    # so the result is bit-reproducible.
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n_rows).astype(np.float64)
    m = len(index)
    if m == 0:
        return np.zeros((n_rows,) + values.shape[1:])
    S = sp.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_rows, m))
    flat = values.reshape(m, -1)
    return np.asarray(S @ flat).reshape((n_rows,) + values.shape[1:])


def _topological_order(root):
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


# -- functional helpers ------------------------------------------------------

def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def index_add(values, index, n_rows):
    """Sum rows of ``values`` into ``n_rows`` buckets given by ``index``."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        values._accumulate(g[index])

    return _result(_scatter_rows(values.data, index, n_rows), (values,), back)


def softmax(logits, axis=-1):
    logits = as_tensor(logits)
    shifted = logits - Tensor(logits.data.max(axis=axis, keepdims=True))
    z = shifted.exp()
    return z / z.sum(axis=axis, keepdims=True)


def segment_softmax(logits, segments, n_segments):
    """Softmax of a 1-D logit vector within each segment id.

    Segments with no members are simply absent from the output.
    """
    logits = as_tensor(logits)
    segments = np.asarray(segments, dtype=np.int64)
    if len(segments) == 0:
        return Tensor(np.zeros(0))
    peak = np.full(n_segments, -np.inf)
    np.maximum.at(peak, segments, logits.data)
    z = (logits - Tensor(peak[segments])).exp()
    denom = index_add(z, segments, n_segments)
    return z / denom.take(segments)
