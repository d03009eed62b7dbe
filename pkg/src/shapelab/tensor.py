"""Dense tensors with reverse-mode automatic differentiation.

A small tape-based autograd over numpy arrays. Every differentiable op
records a node holding its parents and a backward closure; ``backward``
walks the tape in reverse topological order and accumulates gradients.

Training runs in float32; a float64 mode exists for gradient verification
(``grad_check``). Set ``shapelab.tensor.DEBUG_CHECKS = True`` (or export
``SHAPELAB_DEBUG=1``) to assert finiteness after every op.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DEBUG_CHECKS = bool(int(os.environ.get("SHAPELAB_DEBUG", "0")))

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check(arr):
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value produced by tensor op")
    return arr


class Tensor:
    """N-dimensional array node in the autograd graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph ------------------------------------------------------------

    def backward(self, grad=None):
        """Populate ``grad`` on every reachable requires_grad tensor.

        Repeated calls accumulate unless grads are zeroed in between.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() requires a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
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
        grads = {id(self): grad.astype(self.data.dtype, copy=True)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return multiply(self, power(_wrap(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return scale(reduce_sum(self, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _wrap(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(_check(data))
    if _GRAD_ENABLED and any(
            p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def multiply(a, b):
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def scale(a, s):
    a = _wrap(a)
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _make(a.data * s, (a,), bwd)


def power(a, p):
    a = _wrap(a)
    p = float(p)

    def bwd(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _make(np.power(a.data, p), (a,), bwd)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (a,), bwd)


def log(a):
    a = _wrap(a)

    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd)


def matmul(a, b):
    """Batched matrix product via numpy broadcasting rules."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def bwd(g):
        bt = np.swapaxes(b.data, -1, -2) if b.ndim > 1 else b.data
        at = np.swapaxes(a.data, -1, -2) if a.ndim > 1 else a.data
        ga = np.matmul(g, bt) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.matmul(at, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), bwd)


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bwd)


def getitem(a, idx):
    a = _wrap(a)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bwd)


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def gelu(a):
    """Exact (erf-based) GeLU."""
    a = _wrap(a)
    x = a.data
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(x * inv_sqrt2))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), bwd)


def softmax(a, axis=-1):
    a = _wrap(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-6):
    """Normalize over the last axis, then apply elementwise gain and bias."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        n = x.shape[-1]
        gg = g * gain.data
        dxhat_sum = gg.sum(axis=-1, keepdims=True)
        dxhat_dot = (gg * xhat).sum(axis=-1, keepdims=True)
        ga = inv * (gg - dxhat_sum / n - xhat * dxhat_dot / n)
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return ga, ggain, gbias

    return _make(out, (a, gain, bias), bwd)


def embedding(table, ids):
    """Row lookup into ``table``; gradient scatters back into looked-up rows."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bwd)


def dropout(a, rate, rng, training=True):
    """Inverted-scaling dropout; identity when rate == 0 or not training."""
    a = _wrap(a)
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)

    def bwd(g):
        return (g * keep,)

    return _make(a.data * keep, (a,), bwd)


def stop_gradient(a):
    a = _wrap(a)

    def bwd(g):
        return (None,)

    out = _make(a.data, (a,), bwd)
    out._parents = ()
    out._backward = None
    return out


def add_bias_mask(a, mask_bias):
    """Add a constant (non-differentiable) bias array, e.g. -inf attention mask."""
    a = _wrap(a)
    bias = np.asarray(mask_bias, dtype=a.dtype)

    def bwd(g):
        return (g,)

    return _make(a.data + bias, (a,), bwd)


def softmax_xent(logits, targets, weights, smoothing=0.0):
    """Weighted mean label-smoothed cross-entropy over positions.

    ``logits`` is [T, V] or [B, T, V]; ``targets`` integer ids of matching
    leading shape; ``weights`` nonnegative per-position weights. Positions
    with weight 0 contribute nothing to the value or the gradient. The
    smoothed target puts (1 - eps) on the gold id and eps/V uniformly over
    the whole vocabulary.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=logits.dtype)
    if np.any(weights < 0):
        raise ValueError("loss weights must be nonnegative")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    v = logits.shape[-1]
    if targets.size and targets.max() >= v:
        raise IndexError("target id exceeds vocabulary size")
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("softmax_xent: empty weight support")

    x = logits.data
    xmax = x.max(axis=-1, keepdims=True)
    lse = xmax + np.log(np.exp(x - xmax).sum(axis=-1, keepdims=True))
    logp = x - lse
    gold = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    per_pos = -(1.0 - smoothing) * gold - (smoothing / v) * logp.sum(axis=-1)
    loss = (per_pos * weights).sum() / wsum

    def bwd(g):
        p = np.exp(logp)
        grad = p.copy() * (1.0 - smoothing)
        np.add.at(grad.reshape(-1, v),
                  (np.arange(targets.size),
                   targets.reshape(-1)), -(1.0 - smoothing))
        grad += (smoothing / v) * (v * p - 1.0)
        grad *= (weights / wsum)[..., None]
        return (g * grad,)

    return _make(loss, (logits,), bwd)


# -- parameter container ----------------------------------------------------

class ParamTree(dict):
    """Named mapping from hierarchical path to Tensor, iterated lexicographically."""

    def __iter__(self):
        return iter(sorted(dict.keys(self)))

    def keys(self):
        return sorted(dict.keys(self))

    def items(self):
        return [(k, self[k]) for k in self.keys()]

    def values(self):
        return [self[k] for k in self.keys()]

    def subtree(self, prefix):
        sub = ParamTree()
        for k in self.keys():
            if k == prefix or k.startswith(prefix + "."):
                sub[k] = self[k]
        return sub

    def zero_grads(self):
        for t in self.values():
            t.zero_grad()

    def flatten(self):
        if not len(self):
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([self[k].data.reshape(-1) for k in self.keys()])

    def copy(self):
        out = ParamTree()
        for k in self.keys():
            t = self[k]
            out[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return out


def parameter(data, rng=None, shape=None, std=None, dtype=np.float32):
    """Create a trainable leaf tensor; Gaussian init when ``std`` given."""
    if data is None:
        data = rng.normal(0.0, std, size=shape)
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def grad_check(f, params, eps=1e-5, n_samples=50, rng=None):
    """Max relative error of autograd vs central finite differences.

    ``f`` must be a deterministic scalar-valued function of ``params``;
    parameters should be float64.
    """
    rng = rng or np.random.default_rng(0)
    loss = f(params)
    again = f(params)
    if not np.allclose(loss.data, again.data, rtol=0, atol=0):
        raise RuntimeError("grad_check: function is not deterministic")
    params.zero_grads()
    loss = f(params)
    loss.backward()
    worst = 0.0
    for key in params.keys():
        t = params[key]
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        n = min(n_samples, flat.size)
        for idx in rng.choice(flat.size, size=n, replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = f(params).item()
            flat[idx] = orig - eps
            down = f(params).item()
            flat[idx] = orig
            fd = (up - down) / (2.0 * eps)
            ag = t.grad.reshape(-1)[idx] if t.grad is not None else 0.0
            rel = abs(ag - fd) / (abs(fd) + eps)
            worst = max(worst, rel)
    return worst
