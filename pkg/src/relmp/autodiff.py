"""A small reverse-mode gradient tape over numpy arrays.

Only the operations the relation-prediction model needs are provided. Each op
records its parents and a closure that pushes the output gradient back to them;
``Tensor.backward`` walks the tape in reverse topological order.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def scatter_add(idx, vals, n: int) -> np.ndarray:
    """``out[k] = sum of vals[i] with idx[i] == k``, as a sparse 0/1 matrix product."""
    idx = np.asarray(idx, dtype=np.int64)
    if vals.ndim == 1:
        return np.bincount(idx, weights=vals, minlength=n).astype(vals.dtype, copy=False)
    sel = sparse.csr_matrix((np.ones(len(idx), dtype=vals.dtype), (idx, np.arange(len(idx)))),
                            shape=(n, len(idx)))
    return np.asarray(sel @ vals.reshape(len(idx), -1)).reshape((n,) + vals.shape[1:])


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _tensor(a)
    b = _tensor(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _tensor(a)
    b = _tensor(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _tensor(a)
    b = _tensor(b, a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _tensor(a), _tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        x._accumulate(g * pos)

    return _result(np.where(pos, x.data, 0).astype(x.data.dtype, copy=False), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _result(y, (x,), backward)


def gather(x: Tensor, idx) -> Tensor:
    """Rows ``x[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        x._accumulate(scatter_add(idx, g, x.shape[0]))

    return _result(x.data[idx], (x,), backward)


def segment_sum(x: Tensor, seg, n: int) -> Tensor:
    """``out[s] = sum of x[i] over i with seg[i] == s`` for ``s < n``."""
    seg = np.asarray(seg, dtype=np.int64)
    out = scatter_add(seg, x.data, n)

    def backward(g):
        x._accumulate(g[seg])

    return _result(out, (x,), backward)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x._accumulate(g[tuple(sl)])

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def outer_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise flattened outer product: ``out[n, i*d + j] = a[n, i] * b[n, j]``."""
    n, da = a.shape
    db = b.shape[1]
    out = (a.data[:, :, None] * b.data[:, None, :]).reshape(n, da * db)

    def backward(g):
        g3 = g.reshape(n, da, db)
        if a.requires_grad:
            a._accumulate(np.einsum("nij,nj->ni", g3, b.data))
        if b.requires_grad:
            b._accumulate(np.einsum("nij,ni->nj", g3, a.data))

    return _result(out, (a, b), backward)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """``out[n] = a[n] . b[n]``."""

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, None] * b.data)
        if b.requires_grad:
            b._accumulate(g[:, None] * a.data)

    return _result(np.einsum("nd,nd->n", a.data, b.data), (a, b), backward)


def segment_softmax(logits: Tensor, seg, n: int) -> Tensor:
    """Softmax of a 1-D array within each group of equal ``seg``."""
    seg = np.asarray(seg, dtype=np.int64)
    x = logits.data
    mx = np.full(n, -np.inf, dtype=x.dtype)
    np.maximum.at(mx, seg, x)
    e = np.exp(x - mx[seg])
    z = scatter_add(seg, e, n)
    y = e / z[seg]

    def backward(g):
        s = scatter_add(seg, g * y, n)
        logits._accumulate(y * (g - s[seg]))

    return _result(y, (logits,), backward)


def softmax_cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels (log-space)."""
    labels = np.asarray(labels, dtype=np.int64)
    s = scores.data
    shifted = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = np.mean(logz - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        scores._accumulate(g * p / len(labels))

    return _result(np.asarray(loss, dtype=s.dtype), (scores,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def sum_squares(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(2.0 * g * x.data)

    return _result(np.asarray(np.sum(x.data * x.data), dtype=x.data.dtype), (x,), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        x._accumulate(g * c)

    return _result(x.data * np.asarray(c, dtype=x.data.dtype), (x,), backward)
