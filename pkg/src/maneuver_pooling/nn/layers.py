"""LSTM, convolution and pooling ops with hand-written backward passes."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, _make, _sigmoid, affine

# gate layout along the 4*hidden axis
GATES = ("input", "forget", "cell", "output")


class ParamStore(OrderedDict):
    """Named learnable tensors. Names are unique by construction."""

    def __init__(self, rng=None, dtype=np.float64):
        super().__init__()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = np.dtype(dtype)

    def __setitem__(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        super().__setitem__(name, value)

    def add(self, name, array):
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)
        self[name] = t
        return t

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def linear(self, prefix, n_in, n_out):
        return (self.uniform(f"{prefix}.weight", (n_out, n_in), n_in),
                self.uniform(f"{prefix}.bias", (n_out,), n_in))

    def lstm(self, prefix, n_in, hidden):
        w = self.uniform(f"{prefix}.W", (4 * hidden, n_in), n_in)
        u = self.uniform(f"{prefix}.U", (4 * hidden, hidden), hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        return LstmParams(w, u, self.add(f"{prefix}.b", b))

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def astype(self, dtype):
        """Copy of the store with every tensor cast to ``dtype``."""
        out = ParamStore(self.rng, dtype)
        for name, t in self.items():
            out.add(name, t.data)
        return out

    def state(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.items())

    def load_state(self, state):
        missing = set(self) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, t in self.items():
            value = np.asarray(state[name], dtype=self.dtype)
            if value.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {t.shape}")
            t.data = value.copy()


@dataclass
class LstmParams:
    W: Tensor  # (4H, I)
    U: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    @property
    def input_size(self):
        return self.W.shape[1]

    @property
    def hidden_size(self):
        return self.U.shape[1]

    @staticmethod
    def lookup(store, prefix):
        return LstmParams(store[f"{prefix}.W"], store[f"{prefix}.U"], store[f"{prefix}.b"])


def _gates(z, hidden):
    # sigmoid(z) = (1 + tanh(z / 2)) / 2: one pass over the block, no overflow
    a = np.tanh(z * np.asarray(0.5, z.dtype))
    a[:, :2 * hidden] += 1
    a[:, 3 * hidden:] += 1
    a[:, :2 * hidden] *= 0.5
    a[:, 3 * hidden:] *= 0.5
    a[:, 2 * hidden:3 * hidden] = np.tanh(z[:, 2 * hidden:3 * hidden])
    return a[:, :hidden], a[:, hidden:2 * hidden], a[:, 2 * hidden:3 * hidden], a[:, 3 * hidden:]


def _gate_grads(dc, do, c_prev, i, f, g, o):
    return np.concatenate(
        [dc * g * i * (1 - i), dc * c_prev * f * (1 - f), dc * i * (1 - g * g), do * o * (1 - o)],
        axis=1,
    )


def _check_lstm(p, x, h, c):
    hidden = p.hidden_size
    if p.W.shape != (4 * hidden, p.input_size) or p.b.shape != (4 * hidden,):
        raise ShapeError(f"lstm: inconsistent params W{p.W.shape} U{p.U.shape} b{p.b.shape}")
    if x.ndim != 2 or x.shape[1] != p.input_size:
        raise ShapeError(f"lstm: input shape {x.shape} does not match W {p.W.shape}")
    for name, s in (("h", h), ("c", c)):
        if s is not None and s.shape != (x.shape[0], hidden):
            raise ShapeError(f"lstm: {name} shape {s.shape} != expected {(x.shape[0], hidden)}")


def lstm_step(p: LstmParams, x: Tensor, h: Tensor, c: Tensor):
    """One LSTM cell update for a batch of rows; returns ``(h', c')``."""
    _check_lstm(p, x, h, c)
    hidden = p.hidden_size
    zx = affine(p.W, p.b, x)
    z = zx.data + h.data @ p.U.data.T
    i, f, g, o = _gates(z, hidden)
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(grad):
        dh, dc = grad[:, :hidden], grad[:, hidden:]
        do = dh * tc
        dc = dc + dh * o * (1 - tc * tc)
        dz = _gate_grads(dc, do, c.data, i, f, g, o)
        return dz, dz @ p.U.data, dz.T @ h.data, dc * f

    hc = _make(np.concatenate([h_new, c_new], axis=1), (zx, h, p.U, c), backward)
    return hc[:, :hidden], hc[:, hidden:]


def lstm_sequence(p: LstmParams, xs: Tensor, steps=None, h0=None, c0=None):
    """Unroll the cell over time and return every hidden state, shape ``(T, N, H)``.

    ``xs`` is either ``(T, N, I)`` or, with ``steps`` given, a constant
    ``(N, I)`` input fed at each of ``steps`` steps. Zero initial state
    unless ``h0``/``c0`` are supplied.
    """
    constant = steps is not None
    if constant:
        if xs.ndim != 2:
            raise ShapeError(f"lstm_sequence: constant input must be 2-D, got {xs.shape}")
        n_steps, n_rows = steps, xs.shape[0]
        _check_lstm(p, xs, h0, c0)
        zx = affine(p.W, p.b, xs)
    else:
        if xs.ndim != 3:
            raise ShapeError(f"lstm_sequence: input must be (T, N, I), got {xs.shape}")
        n_steps, n_rows = xs.shape[0], xs.shape[1]
        if xs.shape[2] != p.input_size:
            raise ShapeError(f"lstm_sequence: input shape {xs.shape} does not match W {p.W.shape}")
        _check_lstm(p, Tensor(np.zeros((n_rows, p.input_size))), h0, c0)
        flat = xs.reshape(n_steps * n_rows, xs.shape[2])
        zx = affine(p.W, p.b, flat).reshape(n_steps, n_rows, 4 * p.hidden_size)
    hidden = p.hidden_size
    dtype = zx.dtype
    h = np.zeros((n_rows, hidden), dtype) if h0 is None else h0.data
    c = np.zeros((n_rows, hidden), dtype) if c0 is None else c0.data
    U = p.U.data
    hs = np.empty((n_steps, n_rows, hidden), dtype)
    cache = []
    for t in range(n_steps):
        z = (zx.data if constant else zx.data[t]) + h @ U.T
        i, f, g, o = _gates(z, hidden)
        c_prev, h_prev = c, h
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[t] = h
        cache.append((h_prev, c_prev, i, f, g, o, tc))

    def backward(grad):
        dz_all = np.empty((n_steps, n_rows, 4 * hidden), dtype)
        h_prev_all = np.empty((n_steps, n_rows, hidden), dtype)
        dh_next = np.zeros((n_rows, hidden), dtype)
        dc_next = np.zeros((n_rows, hidden), dtype)
        for t in reversed(range(n_steps)):
            h_prev, c_prev, i, f, g, o, tc = cache[t]
            dh = grad[t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1 - tc * tc)
            dz = _gate_grads(dc, do, c_prev, i, f, g, o)
            dz_all[t] = dz
            h_prev_all[t] = h_prev
            dh_next = dz @ U
            dc_next = dc * f
        flat_dz = dz_all.reshape(n_steps * n_rows, 4 * hidden)
        dU = flat_dz.T @ h_prev_all.reshape(n_steps * n_rows, hidden)
        dzx = dz_all.sum(axis=0) if constant else dz_all
        return dzx, dU, dh_next, dc_next

    parents = [zx, p.U]
    parents.append(h0 if h0 is not None else Tensor(np.zeros((n_rows, hidden), dtype)))
    parents.append(c0 if c0 is not None else Tensor(np.zeros((n_rows, hidden), dtype)))
    return _make(hs, parents, backward)


def conv2d(kernel: Tensor, x: Tensor, bias: Tensor = None):
    """Valid-mode stride-1 cross-correlation.

    ``x`` is ``(N, Cin, H, W)`` (or ``(Cin, H, W)``), ``kernel`` is
    ``(Cout, Cin, kh, kw)``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if kernel.ndim != 4 or x.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: kernel {kernel.shape} does not match input {x.shape}")
    cout, cin, kh, kw = kernel.shape
    n, _, height, width = x.shape
    if kh > height or kw > width:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    ho, wo = height - kh + 1, width - kw + 1
    # im2col: one row per output position, columns ordered (channel, i, j)
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gk = (gflat.T @ cols).reshape(kernel.shape)
        dcols = (gflat @ kmat).reshape(n, ho, wo, cin, kh, kw)
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grads = [gk, gx]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = [kernel, x] + ([bias] if bias is not None else [])
    out = _make(np.ascontiguousarray(out, dtype=x.dtype), parents, backward)
    return out.reshape(out.shape[1:]) if squeeze else out


def _pool_geometry(x, window, stride):
    kh, kw = window
    sh, sw = stride if stride is not None else window
    height, width = x.shape[-2:]
    if kh > height or kw > width:
        raise ShapeError(f"pool: window {window} larger than input {x.shape}")
    return kh, kw, sh, sw, (height - kh) // sh + 1, (width - kw) // sw + 1


def _pool_windows(data, kh, kw, sh, sw):
    return sliding_window_view(data, (kh, kw), axis=(-2, -1))[..., ::sh, ::sw, :, :]


def _scatter_windows(shape, dtype, per_cell, kh, kw, sh, sw, ho, wo):
    gx = np.zeros(shape, dtype)
    for i in range(kh):
        for j in range(kw):
            gx[..., i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += per_cell[..., i, j]
    return gx


def sumpool2d(x: Tensor, window, stride=None):
    """Window sums over the last two axes; trailing partial windows are dropped."""
    kh, kw, sh, sw, ho, wo = _pool_geometry(x, window, stride)
    out = _pool_windows(x.data, kh, kw, sh, sw).sum(axis=(-2, -1))

    def backward(g):
        per_cell = np.broadcast_to(g[..., None, None], g.shape + (kh, kw))
        return (_scatter_windows(x.shape, x.dtype, per_cell, kh, kw, sh, sw, ho, wo),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def maxpool2d(x: Tensor, window, stride=None):
    """Window maxima over the last two axes; ties route the gradient to the first maximum."""
    kh, kw, sh, sw, ho, wo = _pool_geometry(x, window, stride)
    win = _pool_windows(x.data, kh, kw, sh, sw)
    flat = win.reshape(win.shape[:-2] + (kh * kw,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(flat.shape, x.dtype)
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        per_cell = (onehot * g[..., None]).reshape(g.shape + (kh, kw))
        return (_scatter_windows(x.shape, x.dtype, per_cell, kh, kw, sh, sw, ho, wo),)

    return _make(np.ascontiguousarray(out), (x,), backward)
