"""Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap numpy arrays.  Every differentiable operation records its parents
and a backward closure on the freshly created output tensor; the implicit tape
is the DAG itself and is discarded with the tensors after ``backward``.  The
element type is a process-wide build choice (``set_dtype``); all oracle-based
tests run in 64-bit.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_DTYPE = np.float64
_GRAD_ENABLED = True
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_dtype(kind):
    """Select the element type: "float64" (default, tests) or "float32"."""
    global _DTYPE
    if kind not in ("float64", "float32"):
        raise ValueError(f"unsupported dtype {kind!r}")
    _DTYPE = np.float64 if kind == "float64" else np.float32


def dtype():
    return _DTYPE


def element_size():
    return np.dtype(_DTYPE).itemsize


class no_grad:
    """Context manager disabling graph recording (pure evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Create an op output, check finiteness, and attach the tape node."""
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _DTYPE else data.astype(_DTYPE)
    out.grad = None
    if not np.all(np.isfinite(out.data)):
        raise NumericError("operation produced NaN or Inf")
    track = _GRAD_ENABLED and any(
        p.requires_grad or p._parents for p in parents
    )
    if track:
        out.requires_grad = False
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t, g):
    # grads are never mutated in place, so aliasing the incoming array is safe
    t.grad = g if t.grad is None else t.grad + g


# -- elementwise arithmetic --------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    data = a.data ** e

    def backward(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return _make(data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(data, (a,), backward)


def gelu(a):
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _make(data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def silu(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def backward(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), backward)


# -- reductions and shaping --------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(np.asarray(data), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(data, (a,), backward)


def slice_rows(a, start, stop):
    a = as_tensor(a)
    data = a.data[start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    return _make(data, (a,), backward)


def slice_cols(a, start, stop):
    a = as_tensor(a)
    data = a.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accum(a, full)

    return _make(data, (a,), backward)


def gather_rows(a, indices):
    """Row lookup a[indices]; backward scatter-adds (embedding-style)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(data, (a,), backward)


def gather_cols(a, indices):
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[:, idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full.T, idx, g.T)
        _accum(a, full)

    return _make(data, (a,), backward)


# -- linear algebra -----------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(
            f"matmul batch dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    # einsum accumulates sequentially (no FMA), so results match a naive
    # summation loop bit-for-bit; BLAS matmul differs in the last ulp
    if a.data.ndim == 2:
        data = np.einsum("ik,kj->ij", a.data, b.data)
    else:
        data = np.einsum("...ik,...kj->...ij", a.data, b.data)

    def backward(g):
        _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accum(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(data, (a, b), backward)


def _causal_mask(t):
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def softmax_causal(scores):
    """Row-wise causal softmax over the trailing two (square) dims.

    Position t attends to positions <= t; strictly upper-triangular entries
    of the output are exactly zero.  Stabilized by row-max subtraction.
    """
    scores = as_tensor(scores)
    sh = scores.data.shape
    if len(sh) < 2 or sh[-1] != sh[-2]:
        raise ShapeError(f"softmax_causal needs square trailing dims, got {sh}")
    t = sh[-1]
    mask = _causal_mask(t)
    masked = np.where(mask, -np.inf, scores.data)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    e[..., mask] = 0.0
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        _accum(scores, probs * (g - inner))

    return _make(probs, (scores,), backward)


def cross_entropy(logits, targets):
    """Mean next-token NLL of logits[T x V] against integer targets[T]."""
    logits = as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or tgt.ndim != 1 or tgt.shape[0] != logits.data.shape[0]:
        raise ShapeError("cross_entropy expects logits [T x V] and targets [T]")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    nll = lse - x[np.arange(tgt.shape[0]), tgt]
    data = np.asarray(nll.mean())

    def backward(g):
        soft = np.exp(x - m)
        soft /= soft.sum(axis=-1, keepdims=True)
        soft[np.arange(tgt.shape[0]), tgt] -= 1.0
        _accum(logits, (float(g) / tgt.shape[0]) * soft)

    return _make(data, (logits,), backward)


def mse(a, b):
    """Mean squared error over all elements."""
    d = sub(a, b)
    return tmean(mul(d, d))


# -- normalization ------------------------------------------------------


def normalize(x, weight, bias=None, kind="rmsnorm", eps=1e-6):
    """Per-row rmsnorm or layernorm over the trailing dimension."""
    from .errors import ConfigError

    if eps <= 0:
        raise ConfigError(f"normalize eps must be > 0, got {eps}")
    x = as_tensor(x)
    if kind == "rmsnorm":
        ms = tmean(mul(x, x), axis=-1, keepdims=True)
        inv = power(add(ms, eps), -0.5)
        return mul(mul(x, inv), weight)
    if kind == "layernorm":
        mu = tmean(x, axis=-1, keepdims=True)
        xc = sub(x, mu)
        var = tmean(mul(xc, xc), axis=-1, keepdims=True)
        y = mul(mul(xc, power(add(var, eps), -0.5)), weight)
        if bias is not None:
            y = add(y, bias)
        return y
    raise ConfigError(f"unknown norm kind {kind!r}")


# -- backward pass ------------------------------------------------------


def backward(loss):
    """Reverse-mode sweep from a scalar loss over its recorded ancestry."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    # intermediate grads are only needed during the sweep
    for node in topo:
        if node._parents and node is not loss:
            node.grad = None


def grad_check(f, params, eps=1e-5, n_coords=20, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from scratch on each call; ``params`` are
    the requires_grad leaves probed on a random coordinate subset.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        if an is None:
            an = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            with no_grad():
                hi = float(f().data)
            flat[c] = orig - eps
            with no_grad():
                lo = float(f().data)
            flat[c] = orig
            cd = (hi - lo) / (2.0 * eps)
            a = float(an.reshape(-1)[c])
            rel = abs(a - cd) / (abs(a) + abs(cd) + 1e-12)
            worst = max(worst, rel)
    for p in params:
        p.zero_grad()
    return worst
