"""Minimal dense tensor algebra with reverse-mode gradient accumulation.

Everything downstream (routers, experts, the toy encoder/decoder, all losses)
computes through the ops defined here. Values are float64 numpy arrays; each
op optionally records a backward closure on an implicit tape (the graph of
``_parents`` links), replayed in reverse topological order by
``Tensor.backward``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced or encountered a non-finite value."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (teacher/eval forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array with an optional gradient buffer.

    ``data`` is never mutated by ops after construction; optimizers update
    parameter tensors in place between steps, which is the one sanctioned
    mutation point.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @staticmethod
    def zeros(*shape) -> "Tensor":
        return Tensor(np.zeros(shape))

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff core --------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g


def _track(*tensors: Tensor) -> bool:
    if not _GRAD_ENABLED:
        return False
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward) -> Tensor:
    if parents:
        out = Tensor(data, _parents=parents, _backward=backward)
    else:
        out = Tensor(data)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise arithmetic ---------------------------------------------------

def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a: Tensor, b: Tensor, data, da, db) -> Tensor:
    if not _track(a, b):
        return Tensor(data)

    def backward(g):
        a._accum(_unbroadcast(da(g), a.data.shape))
        b._accum(_unbroadcast(db(g), b.data.shape))

    return _make(data, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _binary(a, b, a.data / b.data,
                   lambda g: g / b.data,
                   lambda g: -g * a.data / (b.data * b.data))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    if not _track(a):
        return Tensor(data)
    return _make(data, (a,), lambda g: a._accum(g.reshape(a.data.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    if not _track(a):
        return Tensor(a.data * c)
    return _make(a.data * c, (a,), lambda g: a._accum(g * c))


Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = lambda self: scale(self, -1.0)
Tensor.__truediv__ = lambda self, other: div(self, other)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy 1-D/2-D semantics."""
    a, b = _as_tensor(a), _as_tensor(b)
    ka = a.data.shape[-1]
    kb = b.data.shape[0] if b.data.ndim >= 1 else None
    if ka != kb:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data
    if not _track(a, b):
        return Tensor(data)

    def backward(g):
        ga = np.atleast_2d(g) if False else g
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            a._accum(g * bd)
            b._accum(g * ad)
        elif ad.ndim == 2 and bd.ndim == 2:
            a._accum(g @ bd.T)
            b._accum(ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            a._accum(g @ bd.T)
            b._accum(np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:
            a._accum(np.outer(g, bd))
            b._accum(ad.T @ g)
        else:
            raise ShapeError(f"matmul supports rank 1/2 only: {ad.shape}, {bd.shape}")

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if not _track(a):
        return Tensor(a.data.T)
    return _make(a.data.T, (a,), lambda g: a._accum(g.T))


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum()
    if not _track(a):
        return Tensor(data)
    return _make(data, (a,), lambda g: a._accum(np.full_like(a.data, g)))


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    data = a.data.mean()
    if not _track(a):
        return Tensor(data)
    return _make(data, (a,), lambda g: a._accum(np.full_like(a.data, g / n)))


def mean_axis0(a: Tensor) -> Tensor:
    """Column means of a 2-D tensor."""
    a = _as_tensor(a)
    n = a.data.shape[0]
    data = a.data.mean(axis=0)
    if not _track(a):
        return Tensor(data)
    return _make(data, (a,), lambda g: a._accum(np.broadcast_to(g / n, a.data.shape)))


# -- nonlinearities -----------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    if not _track(a):
        return Tensor(t)
    return _make(t, (a,), lambda g: a._accum(g * (1.0 - t * t)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)
    if not _track(a):
        return Tensor(data)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a._accum(g * d)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    if not _track(a):
        return Tensor(data)
    return _make(data, (a,), lambda g: a._accum(g * (a.data > 0)))


def identity(a: Tensor) -> Tensor:
    return _as_tensor(a)


ACTIVATIONS = {"gelu": gelu, "tanh": tanh, "relu": relu, "linear": identity}


# -- softmax family -----------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Row-wise (last axis) softmax with max subtraction."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    if not _track(a):
        return Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a._accum(y * (g - dot))

    return _make(y, (a,), backward)


def logsumexp(a: Tensor) -> Tensor:
    """Row-wise (last axis) logsumexp; returns shape ``a.shape[:-1]``."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("logsumexp of an empty tensor")
    m = a.data.max(axis=-1, keepdims=True)
    s = np.exp(a.data - m).sum(axis=-1, keepdims=True)
    data = (m + np.log(s)).squeeze(-1)
    if not _track(a):
        return Tensor(data)

    def backward(g):
        soft = np.exp(a.data - m) / s
        a._accum(np.expand_dims(g, -1) * soft)

    return _make(data, (a,), backward)


# -- losses -------------------------------------------------------------------

def mse(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse shape mismatch: {pred.data.shape} vs {target.data.shape}")
    d = sub(pred, target)
    return tmean(mul(d, d))


def cross_entropy_with_logits(logits: Tensor, target_id: int) -> Tensor:
    """-log softmax(logits)[target_id] for a 1-D logit vector, via logsumexp."""
    logits = _as_tensor(logits)
    n = logits.data.shape[-1]
    if logits.data.ndim != 1:
        raise ShapeError(f"expected a 1-D logit vector, got {logits.data.shape}")
    if not 0 <= target_id < n:
        raise IndexError(f"target id {target_id} out of range for {n} classes")
    lse = logsumexp(logits)
    picked = take(logits, [target_id])
    return sub(lse, tsum(picked))


def cross_entropy_rows(logits: Tensor, target_ids) -> Tensor:
    """Mean cross-entropy over rows of a 2-D logit matrix."""
    logits = _as_tensor(logits)
    n_rows, n_cls = logits.data.shape
    ids = np.asarray(target_ids, dtype=np.int64)
    if ids.shape != (n_rows,):
        raise ShapeError(f"need {n_rows} targets, got shape {ids.shape}")
    if ids.min() < 0 or ids.max() >= n_cls:
        raise IndexError(f"target id out of range for {n_cls} classes")
    lse = logsumexp(logits)  # [rows]
    flat = ids + np.arange(n_rows) * n_cls
    picked = take(logits, flat)
    return scale(sub(tsum(lse), tsum(picked)), 1.0 / n_rows)


# -- indexing -----------------------------------------------------------------

def index_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]
    if not _track(a):
        return Tensor(data)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accum(buf)

    return _make(data, (a,), backward)


def take(a: Tensor, flat_idx) -> Tensor:
    """Gather elements by flat (row-major) index; backward scatter-adds."""
    a = _as_tensor(a)
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    data = a.data.reshape(-1)[flat_idx]
    if not _track(a):
        return Tensor(data)

    def backward(g):
        buf = np.zeros(a.data.size)
        np.add.at(buf, flat_idx, g)
        a._accum(buf.reshape(a.data.shape))

    return _make(data, (a,), backward)


def scatter_rows(rows: Tensor, idx, n_rows: int) -> Tensor:
    """Place ``rows`` at positions ``idx`` of an all-zero [n_rows x d] tensor.

    Duplicate indices add, making this the adjoint of index_rows.
    """
    rows = _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((n_rows, rows.data.shape[1]))
    np.add.at(data, idx, rows.data)
    if not _track(rows):
        return Tensor(data)
    return _make(data, (rows,), lambda g: rows._accum(g[idx]))


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    if not _track(*parts):
        return Tensor(data)
    sizes = [p.data.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            p._accum(g[off:off + n])
            off += n

    return _make(data, tuple(parts), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 1."""
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=1)
    if not _track(*parts):
        return Tensor(data)
    widths = [p.data.shape[1] for p in parts]

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            p._accum(g[:, off:off + w])
            off += w

    return _make(data, tuple(parts), backward)


def stack_rows(vecs: list[Tensor]) -> Tensor:
    """Stack 1-D tensors into a 2-D tensor."""
    vecs = [_as_tensor(v) for v in vecs]
    data = np.stack([v.data for v in vecs], axis=0)
    if not _track(*vecs):
        return Tensor(data)

    def backward(g):
        for i, v in enumerate(vecs):
            v._accum(g[i])

    return _make(data, tuple(vecs), backward)


# -- normalization ------------------------------------------------------------

def standardize_rows(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance per row (last axis), no learned affine."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    if not _track(a):
        return Tensor(y)

    def backward(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        a._accum(inv * (g - gm - y * gy))

    return _make(y, (a,), backward)


# -- composite ops ------------------------------------------------------------

def attention(Q: Tensor, K: Tensor, V: Tensor, mask=None) -> Tensor:
    """Single-head scaled dot-product attention.

    ``mask`` is an optional [Tq x Tk] array of 0/-inf added to the scores
    (used for causal decoding).
    """
    Q, K, V = _as_tensor(Q), _as_tensor(K), _as_tensor(V)
    if Q.data.ndim != 2 or K.data.ndim != 2 or V.data.ndim != 2:
        raise ShapeError("attention expects 2-D Q, K, V")
    d = Q.data.shape[1]
    if d == 0:
        raise ShapeError("attention feature dimension must be positive")
    if K.data.shape[1] != d or V.data.shape[0] != K.data.shape[0]:
        raise ShapeError(
            f"attention dims disagree: Q {Q.data.shape}, K {K.data.shape}, V {V.data.shape}")
    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(d))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    return matmul(softmax(scores), V)


# -- gradient checking --------------------------------------------------------

def grad_check(f, x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite at x")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    flat = x.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(flat.reshape(x.data.shape))).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(flat.reshape(x.data.shape))).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite evaluation at coordinate {i}")
            numeric[i] = (fp - fm) / (2 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
