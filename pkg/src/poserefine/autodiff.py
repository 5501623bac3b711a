"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just the op set the refiner network and its losses need: matmuls (with
broadcasting), elementwise arithmetic, concat/reshape/transpose, max-pooling
with argmax gradient routing, GELU (tanh approximation), per-group feature
normalization and a fused point+global linear layer. backward() traverses the
tape in reverse topological order and accumulates exact gradients into every
requires_grad tensor.

Tensors are float32 by default; build graphs in float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715
_GN_EPS = 1e-5


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _vjp=None):
        if isinstance(data, DiffTensor):
            raise TypeError("wrap raw arrays, not DiffTensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"DiffTensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad tensor in the tape."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
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
    return order


def as_tensor(x, like: DiffTensor | None = None, dtype=None) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    if dtype is None:
        dtype = like.dtype if like is not None else np.float32
    return DiffTensor(np.asarray(x), dtype=dtype)


def _tracked(*ts):
    return any(t.requires_grad or t._vjp is not None or t._parents for t in ts)


def _make(data, parents, vjp):
    if _tracked(*parents):
        return DiffTensor(data, dtype=data.dtype, _parents=tuple(parents), _vjp=vjp)
    return DiffTensor(data, dtype=data.dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, DiffTensor) else None)
    b = as_tensor(b, like=a)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, DiffTensor) else None)
    b = as_tensor(b, like=a)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, DiffTensor) else None)
    b = as_tensor(b, like=a)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a = as_tensor(a, like=b if isinstance(b, DiffTensor) else None)
    b = as_tensor(b, like=a)
    out = a.data / b.data
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return _make(out, (a, b), vjp)


def scale(a, c: float):
    """Multiply by a python scalar constant."""
    out = a.data * a.dtype.type(c)
    return _make(out, (a,), lambda g: (g * a.dtype.type(c),))


def add_const(a, c: float):
    out = a.data + a.dtype.type(c)
    return _make(out, (a,), lambda g: (g,))


def matmul(a, b):
    out = a.data @ b.data
    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb
    return _make(out, (a, b), vjp)


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def expand(a, axis: int, n: int):
    """Repeat a size-1 axis n times; the gradient sums back over it."""
    if a.data.shape[axis] != 1:
        raise ValueError(f"expand needs a size-1 axis, got {a.data.shape}[{axis}]")
    reps = [1] * a.data.ndim
    reps[axis] = n
    return _make(np.tile(a.data, reps), (a,), lambda g: (g.sum(axis=axis, keepdims=True),))


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).astype(a.dtype, copy=True),)
    return _make(np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        cnt = a.data.size
    else:
        cnt = a.data.shape[axis] if isinstance(axis, int) else int(
            np.prod([a.data.shape[i] for i in axis])
        )
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / cnt)


def tabs(a):
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def tsqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def cross3(a, b):
    """Cross product over the last axis (size 3)."""
    out = np.cross(a.data, b.data)
    def vjp(g):
        return np.cross(b.data, g), np.cross(g, a.data)
    return _make(out, (a, b), vjp)


def max_pool(a, axis: int):
    """Max over one axis; the gradient routes to the (first) argmax slot."""
    x = a.data
    if x.ndim == 3 and axis == 1:
        vals, idx = _kernels.maxpool_argmax(x)
    else:
        vals = x.max(axis=axis)
        idx = x.argmax(axis=axis).astype(np.int64)
    def vjp(g):
        out = np.zeros_like(x)
        gi = np.expand_dims(idx, axis)
        np.put_along_axis(out, gi, np.expand_dims(g, axis), axis=axis)
        return (out,)
    return _make(vals, (a,), vjp)


def gelu(a):
    """GELU via the tanh approximation (both precisions share this formula)."""
    x = a.data
    t = x * x
    t *= _GELU_C1
    t += 1.0
    t *= x
    t *= _GELU_C0
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    def vjp(g):
        inner = x * x
        inner *= 3.0 * _GELU_C1
        inner += 1.0
        inner *= x
        inner *= 0.5 * _GELU_C0
        d = 1.0 - t * t
        d *= inner
        d += 0.5 * (1.0 + t)
        return (g * d,)
    return _make(y, (a,), vjp)


def group_norm(a, groups: int, gamma, beta):
    """Normalize each feature vector per channel group (statistics span only
    the last axis within each group, never across points), then apply the
    per-channel affine. gamma/beta have shape (C,).
    """
    x = a.data
    c = x.shape[-1]
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    m = c // groups
    xg = x.reshape(x.shape[:-1] + (groups, m))
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(_GN_EPS, dtype=x.dtype))
    xhat = xc * inv
    y = xhat.reshape(x.shape) * gamma.data + beta.data
    def vjp(g):
        dgamma = _unbroadcast(g * xhat.reshape(x.shape), gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = (g * gamma.data).reshape(xg.shape)
        # layernorm-style backward within each group of size m
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        dx = (dxhat - s1 / m - xhat * s2 / m) * inv
        return dx.reshape(x.shape), dgamma, dbeta
    return _make(y, (a, gamma, beta), vjp)


def linear(x, w, b):
    """Per-point (1x1 conv) linear layer: x @ w + b with row-broadcast bias."""
    return add(matmul(x, w), b)


def point_global_linear(pt, glob, w, b):
    """Linear layer over concat([pt, glob-broadcast], -1) without materializing it.

    pt is (B, N, Cp), glob is (B, Cg), w is (Cp+Cg, Cout): computes
    concat @ w + b block-wise, so the (B, N, Cp+Cg) tensor never exists.
    """
    cp = pt.data.shape[-1]
    out = pt.data @ w.data[:cp]
    out += (glob.data @ w.data[cp:])[:, None, :]
    out += b.data
    def vjp(g):
        gflat = g.reshape(-1, g.shape[-1])
        dpt = g @ w.data[:cp].T
        gsum = g.sum(axis=1)
        dglob = gsum @ w.data[cp:].T
        dw = np.empty_like(w.data)
        dw[:cp] = pt.data.reshape(-1, cp).T @ gflat
        dw[cp:] = glob.data.T @ gsum
        db = gflat.sum(axis=0)
        return dpt, dglob, dw, db
    return _make(out, (pt, glob, w, b), vjp)


def finite_difference_grad(fn, arrays, h: float = 1e-5):
    """Central finite differences of a scalar fn w.r.t. a list of float64 arrays."""
    grads = []
    for k, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads
