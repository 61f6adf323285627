"""Reverse-mode differentiation over numpy arrays.

Each op builds an output :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError, UsageError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype if dtype is not None else np.float64)


def _make(data, parents, backward):
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), dtype=data.dtype)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def square(x):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z):
    # no overflow for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x):
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping was active."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (np.where(inside, g, 0.0).astype(g.dtype, copy=False),))


def leaky_relu(x, slope=0.1):
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (np.where(pos, g, slope * g),))


# reductions and shape plumbing

def sum_(x, axis=None, keepdims=False):
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def cumsum(x, axis=0):
    out = np.cumsum(x.data, axis=axis)
    return _make(out, (x,), lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inverse),))


def _is_basic(index):
    index = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in index)


def getitem(x, index):
    out = x.data[index]
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), backward)


def concat(tensors, axis=-1):
    tensors = [t if isinstance(t, Tensor) else as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def gather_rows(x, index):
    """``x[index]`` along axis 0 with an integer index array."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def scatter_rows(x, index, n_rows):
    """Zero array of ``n_rows`` rows with ``x[k]`` added at row ``index[k]``."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, index, x.data)
    return _make(out, (x,), lambda g: (g[index],))


def padded_max(x, index):
    """Max over groups of rows.

    ``index`` is an ``(G, K)`` integer array of row ids into ``x`` padded
    with -1. Groups with no rows produce zeros. Ties route the gradient to
    the first maximal entry.
    """
    index = np.asarray(index, dtype=np.int64)
    groups = index.shape[0]
    if index.size == 0 or x.shape[0] == 0:
        return _make(np.zeros((groups,) + x.shape[1:], dtype=x.dtype), (x,),
                     lambda g: (np.zeros_like(x.data),))
    valid = index >= 0
    vals = x.data[np.where(valid, index, 0)]
    mask = valid.reshape(valid.shape + (1,) * (x.ndim - 1))
    vals = np.where(mask, vals, -np.inf)
    arg = np.argmax(vals, axis=1)
    out = np.take_along_axis(vals, arg[:, None], axis=1)[:, 0]
    empty = ~valid.any(axis=1)
    out[empty] = 0.0
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        rows = np.take_along_axis(np.where(valid, index, 0), arg.reshape(groups, -1), axis=1)
        rows = rows.reshape(arg.shape)
        full = np.zeros_like(x.data)
        g = np.where(empty.reshape((-1,) + (1,) * (g.ndim - 1)), 0.0, g)
        cols = np.indices(arg.shape)[1:]
        np.add.at(full, (rows, *cols), g)
        return (full,)

    return _make(out, (x,), backward)


# linear algebra

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(weight, bias, x):
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, in)`` and ``weight`` ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
        parents = (weight, bias, x)
    else:
        parents = (weight, x)

    def backward(g):
        gw = g.T @ x.data
        gx = g @ weight.data
        if bias is not None:
            return gw, g.sum(axis=0), gx
        return gw, gx

    return _make(out, parents, backward)


# softmax family

def softmax(x, axis=-1):
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x, axis=-1):
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))
