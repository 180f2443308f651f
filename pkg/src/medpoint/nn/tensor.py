"""Dense tensors with tape-free reverse-mode differentiation.

Each operation records its parents and a closure mapping the output gradient
to parent gradients. ``backward`` walks the graph once in reverse topological
order. Graphs are rebuilt on every forward pass; parameters are long-lived
leaves whose ``grad`` accumulates until cleared.
"""
from __future__ import annotations

import contextlib

import numba
import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic protocol ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operators -----------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _op(data, parents, backward_fn) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
        # free the closure so intermediate buffers can be collected
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _pair(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if not a_t:
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not b_t:
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _op(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _op(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _op(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _op(out, (a, b), bw)


def neg(a):
    return _op(-a.data, (a,), lambda g: (-g,))


def power(a, p: float):
    out = a.data ** p
    return _op(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,))


def log(a):
    return _op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _op(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
    return _op(out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a):
    x = a.data
    s = _sigmoid(x)
    out = x * s
    return _op(out, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def leaky_relu(a, slope: float = 0.01):
    """max(x, slope*x); the derivative at exactly 0 is taken as ``slope``."""
    x = a.data
    pos = x > 0
    out = np.where(pos, x, x * slope)
    return _op(out, (a,), lambda g: (np.where(pos, g, g * slope),))


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Batched matmul with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold leading axes into one big GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _op(out, (a, b), bw)


def linear(x, w, b=None):
    """x @ w + b applied over every leading index (a shared, point-wise MLP layer)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear expects trailing dim {w.shape[0]}, got {x.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _op(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def max_pool(a, axis=-2):
    """Channel-wise maximum over ``axis``; gradient goes to the first argmax."""
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ValueError("cannot max-pool an empty set")
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    res = _op(out, (a,), bw)
    return res, idx


# ---------------------------------------------------------------------------
# Shape manipulation and indexing
# ---------------------------------------------------------------------------


def reshape(a, shape):
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    return _op(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def expand_dims(a, axis):
    return reshape(a, np.expand_dims(a.data, axis).shape)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        res = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                res.append(g[tuple(sl)])
            else:
                res.append(None)
        return tuple(res)

    return _op(out, tuple(tensors), bw)


def getitem(a, key):
    """Basic (slice/int) indexing. Use :func:`gather` for index arrays."""
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _op(out, (a,), bw)


@numba.njit(cache=True, error_model="numpy")
def _scatter_add_rows(out, idx, vals):
    n, c = vals.shape
    for i in range(n):
        r = idx[i]
        for j in range(c):
            out[r, j] += vals[i, j]


def gather(x, idx):
    """Batched row gather: ``x`` is (B, N, C), ``idx`` integer (B, ...).

    Returns (B, ..., C) with ``out[b, ...] = x[b, idx[b, ...]]``. Repeated
    indices accumulate in the backward pass.
    """
    bsz, n, c = x.shape
    idx = np.asarray(idx)
    if idx.shape[0] != bsz:
        raise ValueError("gather index batch size mismatch")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError("gather index out of range")
    offs = (np.arange(bsz) * n).reshape((bsz,) + (1,) * (idx.ndim - 1))
    flat_idx = (idx + offs).ravel()
    flat = x.data.reshape(bsz * n, c)
    out = flat[flat_idx].reshape(idx.shape + (c,))

    def bw(g):
        acc = np.zeros((bsz * n, c), dtype=g.dtype)
        _scatter_add_rows(acc, flat_idx, np.ascontiguousarray(g).reshape(-1, c))
        return (acc.reshape(x.shape),)

    return _op(out, (x,), bw)


def permute_rows(x, order, inverse=None):
    """Gather along axis -2 with a permutation per leading index.

    ``x`` is (..., N, C) and ``order`` is an integer array with shape
    ``x.shape[:-1]``. The backward pass applies the inverse permutation.
    """
    order = np.asarray(order)
    if inverse is None:
        inverse = np.argsort(order, axis=-1)
    out = np.take_along_axis(x.data, order[..., None], axis=-2)
    return _op(out, (x,), lambda g: (np.take_along_axis(g, inverse[..., None], axis=-2),))


# ---------------------------------------------------------------------------
# Fused normalisation and softmax
# ---------------------------------------------------------------------------


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = 1e-5):
    """Per-row group normalisation over the last axis.

    Statistics are computed independently for every row (point) and channel
    group, so there is no coupling across the batch.
    """
    c = x.shape[-1]
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    gs = c // groups
    xg = x.data.reshape(x.shape[:-1] + (groups, gs))
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xc * rstd).reshape(x.shape)
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = (x,) + tuple(p for p in (gamma, beta) if p is not None)

    def bw(g):
        res = []
        dxhat = g * gamma.data if gamma is not None else g
        if x.requires_grad:
            d = dxhat.reshape(xg.shape)
            xh = xhat.reshape(xg.shape)
            dx = rstd * (d - d.mean(axis=-1, keepdims=True) - xh * (d * xh).mean(axis=-1, keepdims=True))
            res.append(dx.reshape(x.shape))
        else:
            res.append(None)
        if gamma is not None:
            res.append(_unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None)
        if beta is not None:
            res.append(_unbroadcast(g, beta.shape) if beta.requires_grad else None)
        return tuple(res)

    return _op(out, parents, bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _op(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def custom_op(data, parents, backward_fn) -> Tensor:
    """Register an externally computed value with a hand-written backward.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    return _op(data, tuple(parents), backward_fn)
