"""Small reverse-mode autodiff engine over numpy arrays.

Graphs are recorded eagerly (define-by-run): every operation on a
:class:`Tensor` that requires gradients stores its parents and a closure that
maps the output cotangent to parent cotangents.  :func:`backward` walks the
recorded nodes in reverse creation order, so each node is visited once and
only after all of its consumers.

The op set is deliberately closed; it is exactly what the primitive-fitting
pipeline uses, and every op has a finite-difference check in the test suite.
"""
from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass

import numpy as np

from . import _kernels

__all__ = [
    "Tensor", "NonFiniteError", "Svd3Result", "tensor", "constant", "backward",
    "no_grad", "debug_mode", "concat", "stack", "where", "svd3", "svd3_decompose",
    "svd3_backward", "SVD_EPS",
]

SVD_EPS = 1e-6

_ids = itertools.count()
_grad_enabled = True
_debug = os.environ.get("PRIMSEG_DEBUG", "0") not in ("0", "", "false")


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when a forward value or gradient is NaN/Inf."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, oracles)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled=True):
    """Check every forward value and gradient for NaN/Inf."""
    global _debug
    prev, _debug = _debug, enabled
    try:
        yield
    finally:
        _debug = prev


def _check_finite(arr, what, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {what} in op '{op}'")


def _as_array(x, dtype=None):
    arr = np.asarray(x, dtype=dtype)
    if dtype is None and arr.dtype.kind not in "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Immutable array value that may participate in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return self.transpose()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        grads = _run_backward(self)
        for node in grads["_leaves"]:
            node.grad = grads[node._id]

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, _lift(other, self))

    def __rsub__(self, other):
        return _sub(_lift(other, self), self)

    def __mul__(self, other):
        return _mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return _div(_lift(other, self), self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return _matmul(self, _lift(other, self))

    def __rmatmul__(self, other):
        return _matmul(_lift(other, self), self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # -- shape ops --------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self):
        if self.ndim < 2:
            return self
        return _make(np.swapaxes(self.data, -1, -2), (self,),
                     lambda g: (np.swapaxes(g, -1, -2),), "transpose")

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        src = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return _make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims=False):
        return _extremum(self, axis, keepdims, np.argmax, "max")

    def min(self, axis=None, keepdims=False):
        return _extremum(self, axis, keepdims, np.argmin, "min")

    # -- elementwise ------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.data
        return _make(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)

        def bw(g):
            # subgradient 0 at the origin keeps sqrt(0) compositions finite
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, g * 0.5 / safe, 0.0),)

        return _make(out, (self,), bw, "sqrt")

    def abs(self):
        x = self.data
        return _make(np.abs(x), (self,), lambda g: (g * np.sign(x),), "abs")

    def tanh(self):
        out = np.tanh(self.data)
        return _make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def clamp(self, lo=None, hi=None):
        """Clip to [lo, hi]; the gradient passes where the input lies inside."""
        x = self.data
        out = np.clip(x, lo, hi)
        mask = np.ones(x.shape, dtype=bool)
        if lo is not None:
            mask &= x >= lo
        if hi is not None:
            mask &= x <= hi
        return _make(out, (self,), lambda g: (np.where(mask, g, 0.0),), "clamp")

    def softmax(self, axis=-1):
        x = self.data
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
        out = e / np.sum(e, axis=axis, keepdims=True)

        def bw(g):
            return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

        return _make(out, (self,), bw, "softmax")


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "iub" or (arr.ndim == 0 and arr.dtype.kind == "f"):
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _make(data, parents, bw, op):
    if _debug:
        _check_finite(data, "value", op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add(a, b):
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _sub(a, b):
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def _mul(a, b):
    x, y = a.data, b.data
    return _make(x * y, (a, b),
                 lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul")


def _div(a, b):
    x, y = a.data, b.data
    out = x / y
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / y, x.shape),
                            _unbroadcast(-g * out / y, y.shape)), "div")


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return _make(x @ y, (a, b), bw, "matmul")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def _getitem(a, idx):
    src = a.shape
    dtype = a.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(src, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "gather")


def _extremum(a, axis, keepdims, argfn, op):
    x = a.data
    if axis is None:
        flat = int(argfn(x))
        out = x.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * x.ndim)

        def bw(g):
            grad = np.zeros(x.size, dtype=x.dtype)
            grad[flat] = np.sum(g)
            return (grad.reshape(x.shape),)

        return _make(np.asarray(out), (a,), bw, op)

    idx = np.expand_dims(argfn(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(x)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), bw, op)


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


def where(cond, a, b):
    """Elementwise select with a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


# ---------------------------------------------------------------------------
# 3x3 SVD node
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Svd3Result:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def svd3_decompose(m):
    """SVD of one (3, 3) or a batch (..., 3, 3) of matrices, outside any graph."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("svd3 input contains NaN/Inf")
    lead = m.shape[:-2]
    u, s, v = _kernels.svd3(m.reshape(-1, 3, 3))
    return Svd3Result(u.reshape(lead + (3, 3)), s.reshape(lead + (3,)), v.reshape(lead + (3, 3)))


def stabilized_k(s, eps=SVD_EPS):
    """Pairwise 1/(s_i^2 - s_j^2) with the gap floored at ``eps``; zero diagonal."""
    si = s[..., :, None]
    sj = s[..., None, :]
    diff = si - sj
    total = np.maximum(si + sj, np.finfo(np.float64).tiny)
    k = np.sign(diff) / (total * np.maximum(np.abs(diff), eps))
    idx = np.arange(s.shape[-1])
    k[..., idx, idx] = 0.0
    return k


def svd3_backward(res, d_s, d_v, eps=SVD_EPS):
    """Cotangent of the input matrix given cotangents of ``s`` and ``v``.

    The ``u`` factor is assumed unused downstream (its cotangent is zero).
    Works on single matrices and batches alike.
    """
    u, s, v = res.u, res.s, res.v
    d_s = np.asarray(d_s, dtype=np.float64)
    d_v = np.asarray(d_v, dtype=np.float64)
    k = stabilized_k(s, eps)
    vt = np.swapaxes(v, -1, -2)
    inner = np.swapaxes(k, -1, -2) * (vt @ d_v)
    sym = 0.5 * (inner + np.swapaxes(inner, -1, -2))
    mid = 2.0 * s[..., :, None] * sym
    idx = np.arange(3)
    mid[..., idx, idx] += d_s
    return u @ mid @ vt


def svd3(m, eps=SVD_EPS):
    """Differentiable SVD of a (..., 3, 3) tensor.

    Returns ``(u, s, v)`` where ``u`` is a plain array (not part of the
    graph) and ``s``/``v`` are tensors.
    """
    m = m if isinstance(m, Tensor) else Tensor(m)
    res = svd3_decompose(m.data)
    packed = np.concatenate([res.s[..., None, :], res.v], axis=-2).astype(m.dtype)
    dtype = m.dtype

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        return (svd3_backward(res, g[..., 0, :], g[..., 1:, :], eps).astype(dtype),)

    node = _make(packed, (m,), bw, "svd3")
    return res.u.astype(dtype), node[..., 0, :], node[..., 1:, :]


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _run_backward(root):
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    # collect reachable graph nodes
    nodes = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack_.extend(p for p in t._parents if p.requires_grad)
    grads = {root._id: np.ones_like(root.data)}
    leaves = []
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.get(nid)
        if t._backward is None:
            if t.requires_grad:
                leaves.append(t)
                if g is None:
                    grads[nid] = np.zeros_like(t.data)
            continue
        if g is None:
            continue
        parent_grads = t._backward(g)
        for p, pg in zip(t._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if _debug:
                _check_finite(pg, "gradient", t._op)
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = np.asarray(pg, dtype=p.dtype)
    grads["_leaves"] = leaves
    return grads


def backward(root, wrt):
    """Gradients of scalar ``root`` with respect to ``wrt``.

    ``wrt`` is a mapping ``name -> Tensor`` (or a sequence of tensors).
    Tensors that do not influence ``root`` get exact zero gradients.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects the Tensor produced by a forward pass")
    grads = _run_backward(root)
    items = wrt.items() if isinstance(wrt, dict) else enumerate(wrt)
    out = {}
    for key, t in items:
        g = grads.get(t._id)
        out[key] = np.zeros_like(t.data) if g is None else g
    return out if isinstance(wrt, dict) else [out[i] for i in range(len(wrt))]
