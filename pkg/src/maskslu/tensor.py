"""Minimal reverse-mode autodiff over numpy arrays.

Only what the models in this package need: dense float tensors, a dynamically
recorded operation graph, and scalar-loss backward. Float32 by default,
float64 available for gradient verification.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default precision (used by gradient checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward passes run on bare arrays."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array plus optional gradient bookkeeping.

    A Tensor created by an op keeps references to its parents and a vjp
    closure; `backward()` walks the graph once and accumulates gradients
    into every reachable leaf that has `requires_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "iub" and not parents:
            arr = arr.astype(_DEFAULT_DTYPE)
        elif arr.dtype.kind == "f" and not parents and arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate gradients of this (scalar) tensor into graph leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x) -> np.ndarray:
    """Coerce a python scalar / ndarray operand to an array constant."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


def _make(data, parents, vjp) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents), vjp=vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if at else _const(a)
    bd = b.data if bt else _const(b)
    out = ad + bd
    parents = tuple(x for x, is_t in ((a, at), (b, bt)) if is_t)

    def vjp(g):
        grads = []
        if at:
            grads.append(_unbroadcast(g, ad.shape))
        if bt:
            grads.append(_unbroadcast(g, bd.shape))
        return grads

    return _make(out, parents, vjp)


def mul(a, b) -> Tensor:
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    ad = a.data if at else _const(a)
    bd = b.data if bt else _const(b)
    out = ad * bd
    parents = tuple(x for x, is_t in ((a, at), (b, bt)) if is_t)

    def vjp(g):
        grads = []
        if at:
            grads.append(_unbroadcast(g * bd, ad.shape))
        if bt:
            grads.append(_unbroadcast(g * ad, bd.shape))
        return grads

    return _make(out, parents, vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow; gradient is sigmoid(x)."""
    d = x.data
    out = np.log1p(np.exp(-np.abs(d))) + np.maximum(d, 0)

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-d))
        return (g * sig,)

    return _make(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# -- shape -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def strided_slice(x: Tensor, key) -> Tensor:
    """Index with slices or non-repeating integer arrays; gradient scatters back.

    Repeated indices in `key` would drop gradient (plain assignment, not
    accumulation) — use gather_nd / embedding_lookup for those.
    """
    shape = x.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[key] = g
        return (z,)

    return _make(x.data[key], (x,), vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


# -- reductions --------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.data.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.data.shape
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), vjp)


# -- normalization / nonlinearity over an axis --------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    m = d.max(axis=axis, keepdims=True)
    e = np.exp(d - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


def masked_softmax(x: Tensor, valid, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where `valid`; invalid outputs are exactly 0.

    `valid` is a boolean constant, broadcastable against x. Every softmax row
    must contain at least one valid entry.
    """
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.data.shape)
    if not valid.any(axis=axis).all():
        raise ValueError("masked_softmax: a row has no valid positions")
    d = x.data
    m = np.where(valid, d, -np.inf).max(axis=axis, keepdims=True)
    e = np.exp(np.where(valid, d - m, 0.0)) * valid
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    m = d.max(axis=axis, keepdims=True)
    s = d - m
    out = s - np.log(np.exp(s).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    d = x.data
    if d.shape[-1] < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    mu = d.mean(axis=-1, keepdims=True)
    var = d.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * inv
    out = gain.data * xhat + bias.data

    def vjp(g):
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        dxhat = g * gain.data
        n = d.shape[-1]
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        del n
        return (dx, dgain, dbias)

    return _make(out, (x, gain, bias), vjp)


# -- indexing ----------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    out = table.data[ids]

    def vjp(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return _make(out, (table,), vjp)


def gather_nd(x: Tensor, idx0, idx1) -> Tensor:
    """Select rows (idx0[k], idx1[k], :) from a 3-d tensor."""
    idx0 = np.asarray(idx0)
    idx1 = np.asarray(idx1)
    out = x.data[idx0, idx1]

    def vjp(g):
        z = np.zeros_like(x.data)
        np.add.at(z, (idx0, idx1), g)
        return (z,)

    return _make(out, (x,), vjp)


# -- convolution -------------------------------------------------------

def conv2d_3x3_s2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 2, fixed zero padding of 1 on each border.

    Output spatial size is ceil(n/2) per dimension regardless of parity, so
    a frame's receptive field never depends on how far the batch is padded.
    x: [B, C, H, W], w: [O, C, 3, 3], b: [O] -> [B, O, ceil(H/2), ceil(W/2)]
    """
    B, C, H, W = x.data.shape
    O = w.data.shape[0]
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::2, ::2]  # [B, C, Ho, Wo, 3, 3]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * 9)
    wmat = w.data.reshape(O, C * 9)
    out = (col @ wmat.T + b.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def vjp(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        dw = (gflat.T @ col).reshape(O, C, 3, 3)
        db = gflat.sum(axis=0)
        dcol = (gflat @ wmat).reshape(B, Ho, Wo, C, 3, 3)
        dxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                dxp[:, :, di : di + 2 * Ho - 1 : 2, dj : dj + 2 * Wo - 1 : 2] += (
                    dcol[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                )
        return (dxp[:, :, 1 : H + 1, 1 : W + 1], dw, db)

    return _make(out, (x, w, b), vjp)


def conv_output_length(n: int) -> int:
    """Valid-length map of one stride-2 conv: ceil(n/2)."""
    return (n + 1) // 2


# -- verification ------------------------------------------------------

def grad_check(fn, inputs, step: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare analytic gradients of a scalar function against central differences.

    `inputs` are float64 Tensors with requires_grad; `fn(*inputs)` must rebuild
    the graph on every call (the check perturbs input data in place). Returns a
    report dict; raises on non-finite values.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()
    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite forward value in grad_check")
    out.backward()
    per_input = []
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f1 = float(fn(*inputs).data)
            flat[i] = orig - step
            f2 = float(fn(*inputs).data)
            flat[i] = orig
            numeric[i] = (f1 - f2) / (2.0 * step)
        numeric = numeric.reshape(t.data.shape)
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
            raise FloatingPointError("non-finite gradient in grad_check")
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
        rel = float((np.abs(analytic - numeric) / denom).max()) if flat.size else 0.0
        per_input.append(rel)
        worst = max(worst, rel)
    return {"max_rel_err": worst, "per_input": per_input, "passed": worst < tol}
