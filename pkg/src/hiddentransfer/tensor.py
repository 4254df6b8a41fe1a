"""Dense tensor arithmetic with a small reverse-mode gradient tape.

Arrays are numpy underneath (float32 by default, float64 for gradient
checking). Every differentiable op records a vector-Jacobian closure; the
graph is torn down after ``backward``. No parallel reductions beyond what
BLAS does for a fixed shape, so results are reproducible run to run.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus optional gradient bookkeeping.

    `requires_grad` marks a trainable leaf; interior nodes carry parent
    links only while a graph is being recorded. `grad` is populated by
    `backward` for leaves and matches `data`'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjps = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _tracked(self):
        return self.requires_grad or bool(self._parents)

    def detach(self):
        out = Tensor(self.data)
        return out

    def zero_grad(self):
        self.grad = None

    # -- graph -------------------------------------------------------------

    def backward(self):
        """Accumulate dself/dleaf into `.grad` of every requires_grad leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if not self._tracked():
            raise ValueError("backward() on a value with no recorded graph")

        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p._tracked():
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent._tracked():
                    continue
                pg = vjp(g)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.astype(node.data.dtype, copy=True)
                else:
                    node.grad = node.grad + g.astype(node.data.dtype)
            node._parents = ()
            node._vjps = ()

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def item(self):
        return float(self.data.reshape(()))


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjps):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p._tracked() for p in parents):
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitive ops ----------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    return _make(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(g, b.data.shape)))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    return _make(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.data.shape),
                  lambda g: _unbroadcast(g * a.data, b.data.shape)))


def matmul(a, b):
    """Matrix product, 2-D or batched 3-D. Inner dims must agree."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

    def ga(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def gb(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return _make(a.data @ b.data, (a, b), (ga, gb))


def power(a, exponent):
    a = _as_tensor(a)
    out = a.data ** exponent
    return _make(out, (a,),
                 (lambda g: g * exponent * a.data ** (exponent - 1.0),))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a):
    return power(a, 0.5)


def clip_min(a, floor):
    """Elementwise max(a, floor); gradient flows only where a > floor."""
    a = _as_tensor(a)
    out = np.maximum(a.data, floor)
    mask = (a.data > floor).astype(a.data.dtype)
    return _make(out, (a,), (lambda g: g * mask,))


def silu(a):
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return _make(out, (a,), (lambda g: g * (sig * (1.0 + a.data * (1.0 - sig))),))


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).astype(a.data.dtype)

    return _make(out, (a,), (vjp,))


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), (lambda g: g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return vjp

    return _make(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    a = _as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return full

    return _make(a.data[sl], (a,), (vjp,))


def embedding(table, ids):
    """Row lookup table[ids]; gradient scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding id out of range")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return gt

    return _make(table.data[ids], (table,), (vjp,))


def softmax(a, axis=-1):
    """Stable softmax along `axis`. -inf entries (masked) are allowed and
    produce exact zeros; NaN or +inf input is an error."""
    a = _as_tensor(a)
    if np.isnan(a.data).any() or np.isposinf(a.data).any():
        raise ValueError("softmax input contains NaN or +inf")
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make(out, (a,), (vjp,))


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    if np.isnan(a.data).any() or np.isposinf(a.data).any():
        raise ValueError("log_softmax input contains NaN or +inf")
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return g - sm * g.sum(axis=axis, keepdims=True)

    return _make(out, (a,), (vjp,))


# -- composite numerics ------------------------------------------------------

KL_FLOOR = 1e-12


def kl_divergence(target, approx, validate=True):
    """KL(target || approx) for probability vectors (last axis).

    `target` is treated as a constant (teacher side); gradient flows into
    `approx` only. Entries of `approx` are floored at 1e-12 before the log
    and 0*log(0) on the target side contributes zero.
    """
    approx = _as_tensor(approx)
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=approx.dtype)
    if validate:
        for name, arr in (("target", tdata), ("approx", approx.data)):
            if (arr < -1e-7).any():
                raise ValueError(f"kl_divergence: {name} has negative entries")
            s = arr.sum(axis=-1)
            if not np.allclose(s, 1.0, atol=1e-5):
                raise ValueError(f"kl_divergence: {name} is not normalized")
    t_log_t = np.where(tdata > 0, tdata * np.log(np.maximum(tdata, KL_FLOOR)), 0.0)
    cross = mul(Tensor(tdata), log(clip_min(approx, KL_FLOOR)))
    return tsum(Tensor(t_log_t)) - tsum(cross)


def argmax_token(logits):
    """Greedy pick: index of the max logit, ties to the lowest index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.size == 0:
        raise ValueError("argmax_token on empty logits")
    if not np.isfinite(arr).all():
        raise ValueError("argmax_token on non-finite logits")
    return int(np.argmax(arr))


def rms_norm(x, gain, eps=1e-6):
    """Root-mean-square normalization over the last axis, learned gain."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = power(add(ms, eps), -0.5)
    return mul(mul(x, inv), gain)
