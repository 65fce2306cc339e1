"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything trains on CPU at desk scale, so the engine favors exactness over
speed: all data is float64, every op output is checked for NaN/Inf, and
gradients are exact (verified against central finite differences in the
test suite). Broadcasting is restricted to two named patterns, bias-add
(``(..., d) + (d,)``) and row scaling (``(..., d) * (..., 1)``); anything
else is a shape error.
"""

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Additive mask value for attention: large but finite so the finiteness
# checks stay meaningful (exp(-1e30 - max) underflows to exactly 0.0).
NEG_MASK = -1e30


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class GradAccumulationError(RuntimeError):
    """backward() called while leaf gradients are still populated."""


def _as_f64(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_f64(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Parameter(Tensor):
    """A named leaf tensor that optimizers update."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def constant(data):
    """Wrap raw data as a non-differentiable tensor (frozen input)."""
    return Tensor(data, requires_grad=False)


def _result(data, parents, backward, op):
    _check_finite(data, op)
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise add; also the bias pattern (..., d) + (d,)."""
    same = a.data.shape == b.data.shape
    bias = b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]
    if not (same or bias):
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = a.data + b.data

    def backward(g, accum):
        accum(a, g)
        if same:
            accum(b, g)
        else:
            accum(b, g.reshape(-1, b.data.shape[0]).sum(axis=0))

    return _result(out, (a, b), backward, "add")


def mul(a, b):
    """Elementwise multiply by a same-shape tensor or a Python scalar."""
    if isinstance(b, (int, float)):
        s = float(b)
        out = a.data * s

        def backward(g, accum):
            accum(a, g * s)

        return _result(out, (a,), backward, "mul")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = a.data * b.data

    def backward(g, accum):
        accum(a, g * b.data)
        accum(b, g * a.data)

    return _result(out, (a, b), backward, "mul")


def rowscale(x, s):
    """Scale the last axis of ``x`` by ``s`` of shape (..., 1)."""
    if s.data.shape[-1] != 1 or s.data.shape[:-1] != x.data.shape[:-1]:
        raise ShapeError(f"rowscale: incompatible shapes {x.data.shape} and {s.data.shape}")
    out = x.data * s.data

    def backward(g, accum):
        accum(x, g * s.data)
        accum(s, (g * x.data).sum(axis=-1, keepdims=True))

    return _result(out, (x, s), backward, "rowscale")


def matmul(a, b):
    """Matrix product. Supports equal leading batch dims, or 2-D ``b``."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.data.shape} @ {b.data.shape}")
    if b.data.ndim != 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul: leading dims disagree, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def backward(g, accum):
        accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2:
            k, n = b.data.shape
            accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
        else:
            accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(out, (a, b), backward, "matmul")


def embedding_lookup(table, ids):
    """Gather rows of a (V, d) table by an integer id array of any shape."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range for table with {table.data.shape[0]} rows")
    out = table.data[ids]

    def backward(g, accum):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.ravel(), g.reshape(-1, table.data.shape[1]))
        accum(table, buf)

    return _result(out, (table,), backward, "embedding_lookup")


def take_rows(x, idx):
    """Gather rows of a 2-D tensor; the inverse scatter-adds on backward."""
    idx = np.asarray(idx)
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows: input must be 2-D, got {x.data.shape}")
    out = x.data[idx]

    def backward(g, accum):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        accum(x, buf)

    return _result(out, (x,), backward, "take_rows")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: affine shape {gain.data.shape}/{bias.data.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g, accum):
        dxhat = g * gain.data
        accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        accum(bias, g.reshape(-1, d).sum(axis=0))
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        accum(x, (dxhat - m1 - xhat * m2) * inv)

    return _result(out, (x, gain, bias), backward, "layer_norm")


def softmax(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.data.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g, accum):
        accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), backward, "softmax")


def gelu(x):
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g, accum):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        accum(x, g * (cdf + x.data * pdf))

    return _result(out, (x,), backward, "gelu")


def tanh(x):
    out = np.tanh(x.data)

    def backward(g, accum):
        accum(x, g * (1.0 - out * out))

    return _result(out, (x,), backward, "tanh")


def sigmoid(x):
    out = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward(g, accum):
        accum(x, g * out * (1.0 - out))

    return _result(out, (x,), backward, "sigmoid")


def mean(x, axis=None):
    out = x.data.mean(axis=axis)
    size = x.data.size if axis is None else x.data.shape[axis]

    def backward(g, accum):
        if axis is None:
            accum(x, np.full_like(x.data, g / size))
        else:
            accum(x, np.expand_dims(g, axis).repeat(size, axis) / size)

    return _result(out, (x,), backward, "mean")


def tsum(x, axis=None):
    out = x.data.sum(axis=axis)

    def backward(g, accum):
        if axis is None:
            accum(x, np.full_like(x.data, g))
        else:
            accum(x, np.expand_dims(g, axis).repeat(x.data.shape[axis], axis))

    return _result(out, (x,), backward, "sum")


def reshape(x, shape):
    out = x.data.reshape(shape)

    def backward(g, accum):
        accum(x, g.reshape(x.data.shape))

    return _result(out, (x,), backward, "reshape")


def transpose(x, axes):
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g, accum):
        accum(x, np.transpose(g, inv))

    return _result(out, (x,), backward, "transpose")


def concat(tensors, axis):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, accum):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            accum(t, piece)

    return _result(out, tuple(tensors), backward, "concat")


def cross_entropy(logits, target_ids, reduction="mean"):
    """Negative log-likelihood of integer targets under softmax(logits).

    ``logits`` is (B, K); ``target_ids`` is a length-B integer array.
    """
    targets = np.asarray(target_ids)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.data.shape}")
    n, k = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} vs logits {logits.data.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"cross_entropy: target id out of range for {k} classes")
    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    nll = -logp[np.arange(n), targets]
    out = nll.mean() if reduction == "mean" else nll.sum()

    def backward(g, accum):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        accum(logits, p * (g / n if reduction == "mean" else g))

    return _result(out, (logits,), backward, "cross_entropy")


def bce_with_logits(logits, labels, reduction="mean"):
    """Binary cross-entropy on raw logits, numerically stable."""
    y = np.asarray(labels, dtype=np.float64)
    if logits.data.shape != y.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.data.shape} vs labels {y.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = loss.mean() if reduction == "mean" else loss.sum()

    def backward(g, accum):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        scale = g / z.size if reduction == "mean" else g
        accum(logits, (s - y) * scale)

    return _result(out, (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, accumulate=False):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Gradient accumulation across calls must be requested explicitly;
    calling again while leaf grads are populated raises.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise NonFiniteError("backward: loss is not finite")
    if not loss.requires_grad:
        return

    order = _toposort(loss)
    leaves = [t for t in order if not t._parents]
    if not accumulate:
        stale = [t for t in leaves if t.grad is not None]
        if stale:
            name = getattr(stale[0], "name", "<unnamed>")
            raise GradAccumulationError(
                f"backward: leaf {name} already holds a gradient; "
                "zero grads first or pass accumulate=True"
            )

    buffers = {id(loss): np.ones((), dtype=np.float64)}

    def accum(t, g):
        if not t.requires_grad:
            return
        key = id(t)
        if key in buffers:
            buffers[key] = buffers[key] + g
        else:
            buffers[key] = np.array(g, dtype=np.float64, copy=True)

    for node in reversed(order):
        g = buffers.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            node._backward(g, accum)
        else:
            _check_finite(g, "backward")
            node.grad = g if node.grad is None else node.grad + g


def zero_grads(params):
    for p in params:
        p.grad = None
