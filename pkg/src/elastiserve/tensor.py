"""Dense numerics with a small reverse-mode tape.

Tensors are plain ``numpy.ndarray`` objects (float32 for serving, float64 for
gradient checks).  Every op in this module accepts either arrays or
:class:`Var` nodes.  When no input is a tracked :class:`Var`, the op returns a
plain array and records nothing, so the same model code serves both
inference and differentiation.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class DTypeError(ValueError):
    pass


class UnregisteredWeightError(LookupError):
    pass


class Var:
    """A node on the tape.  Leaves are registered weights."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def value(x):
    return x.value if isinstance(x, Var) else x


def _node(out, inputs: Sequence, backward_fn: Callable):
    if any(isinstance(x, Var) for x in inputs):
        return Var(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# --- elementwise -----------------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    sa, sb = _shape(av), _shape(bv)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    sa, sb = _shape(av), _shape(bv)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    sa, sb = _shape(av), _shape(bv)
    return _node(
        out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))
    )


def silu(x):
    xv = value(x)
    sig = expit(xv)
    out = xv * sig
    return _node(out, (x,), lambda g: (g * (sig * (1.0 + xv * (1.0 - sig))),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    xv = value(x)
    inner = _GELU_C * (xv + 0.044715 * xv**3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xv**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return _node(out, (x,), back)


# --- shape ops ---------------------------------------------------------------

def reshape(x, shape):
    xv = value(x)
    old = xv.shape
    return _node(xv.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    xv = value(x)
    inv = np.argsort(axes)
    return _node(xv.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, idx):
    xv = value(x)
    shape, dtype = xv.shape, xv.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _node(xv[idx], (x,), back)


# --- linear algebra ----------------------------------------------------------

def _check_matmul(av, bv):
    if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {av.shape} x {bv.shape}")
    if av.dtype != bv.dtype:
        raise DTypeError(f"matmul dtype mismatch: {av.dtype} vs {bv.dtype}")


def matmul(a, b):
    """``a @ b`` with broadcasting over leading dimensions."""
    av, bv = value(a), value(b)
    _check_matmul(av, bv)
    out = np.matmul(av, bv)
    sa, sb = av.shape, bv.shape

    def back(g):
        ga = gb = None
        if isinstance(a, Var):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), sa)
        if isinstance(b, Var):
            if av.ndim >= 2 and bv.ndim == 2:
                gb = av.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), sb)
        return ga, gb

    return _node(out, (a, b), back)


def linear(x, w, bias=None):
    """``x @ w.T + bias`` for ``w`` stored as (out, in)."""
    xv, wv = value(x), value(w)
    if xv.shape[-1] != wv.shape[-1]:
        raise ShapeError(f"linear input width {xv.shape[-1]} != weight width {wv.shape[-1]}")
    if xv.dtype != wv.dtype:
        raise DTypeError(f"linear dtype mismatch: {xv.dtype} vs {wv.dtype}")
    out = xv @ wv.T
    if bias is not None:
        out = out + value(bias)
    inputs = (x, w) if bias is None else (x, w, bias)

    def back(g):
        gx = gw = None
        if isinstance(x, Var):
            gx = g @ wv
        g2 = g.reshape(-1, g.shape[-1])
        if isinstance(w, Var):
            gw = g2.T @ xv.reshape(-1, xv.shape[-1])
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if isinstance(bias, Var) else None
        return gx, gw, gb

    return _node(out, inputs, back)


def embedding(table, ids):
    tv = value(table)
    ids = np.asarray(ids)
    out = tv[ids]

    def back(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[-1]))
        return (gt,)

    return _node(out, (table,), back)


# --- normalisation / attention pieces ----------------------------------------

def rmsnorm(x, w, eps=1e-6):
    xv, wv = value(x), value(w)
    inv = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    xhat = xv * inv
    out = xhat * wv

    def back(g):
        gw = None
        if isinstance(w, Var):
            gw = (g * xhat).reshape(-1, xv.shape[-1]).sum(axis=0)
        gx = None
        if isinstance(x, Var):
            gh = g * wv
            n = xv.shape[-1]
            gx = inv * (gh - xhat * np.sum(gh * xhat, axis=-1, keepdims=True) / n)
        return gx, gw

    return _node(out, (x, w), back)


def softmax(x, axis=-1):
    xv = value(x)
    z = xv - np.max(xv, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def _rotate_half(v):
    h = v.shape[-1] // 2
    return np.concatenate([-v[..., h:], v[..., :h]], axis=-1)


def _rotate_half_t(v):
    h = v.shape[-1] // 2
    return np.concatenate([v[..., h:], -v[..., :h]], axis=-1)


def rope(x, cos, sin):
    """Rotary embedding along the last (intra-head) axis."""
    xv = value(x)
    out = xv * cos + _rotate_half(xv) * sin
    return _node(out, (x,), lambda g: (g * cos + _rotate_half_t(g * sin),))


def cross_entropy(logits, targets, mask=None):
    """Mean next-token loss over positions where ``mask`` is set."""
    lv = value(logits)
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: empty loss mask")
    z = lv - np.max(lv, axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -np.sum(np.where(mask, picked, 0.0)) / count
    loss = np.asarray(loss, dtype=lv.dtype)

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        scale = (mask / count).astype(lv.dtype)[..., None]
        return (g * (p - onehot) * scale,)

    return _node(loss, (logits,), back)


def sum_all(x):
    xv = value(x)
    shape, dtype = xv.shape, xv.dtype
    return _node(np.asarray(xv.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


# --- tape --------------------------------------------------------------------

class GradTape:
    """Registry of differentiable weights plus one backward pass at a time.

    Single-threaded.  Intermediate nodes keep no gradient after
    :meth:`backward`; only registered weights do.
    """

    def __init__(self):
        self._weights: dict[str, Var] = {}
        self._last_loss: Var | None = None

    def watch(self, name: str, array: np.ndarray) -> Var:
        if name in self._weights:
            raise KeyError(f"weight {name!r} already registered")
        v = Var(array, name=name)
        self._weights[name] = v
        return v

    @property
    def names(self) -> list[str]:
        return list(self._weights)

    def backward(self, loss) -> None:
        if not isinstance(loss, Var):
            raise ValueError("loss does not depend on any registered weight")
        if np.size(loss.value) != 1:
            raise ShapeError("loss must be a scalar")
        for w in self._weights.values():
            w.grad = None
        order = _topo_order(loss)
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(p, Var):
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        self._last_loss = loss

    def grad_of(self, loss, weight) -> np.ndarray:
        name = weight if isinstance(weight, str) else getattr(weight, "name", None)
        if name not in self._weights or (
            isinstance(weight, Var) and self._weights[name] is not weight
        ):
            raise UnregisteredWeightError(f"weight {name!r} is not registered on this tape")
        if self._last_loss is not loss:
            self.backward(loss)
        w = self._weights[name]
        if w.grad is None:
            return np.zeros_like(w.value)
        return w.grad

    def gradients(self, loss) -> dict[str, np.ndarray]:
        return {name: self.grad_of(loss, name) for name in self._weights}


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    return order


def grad_of(tape: GradTape, loss, weight) -> np.ndarray:
    return tape.grad_of(loss, weight)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference product; for tests only."""
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out
