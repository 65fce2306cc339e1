"""Shared neural-network building blocks on top of the tensor engine."""

import numpy as np

from . import tensor as T
from .tensor import Parameter


class ParamSet:
    """Ordered, name-unique registry of model parameters."""

    def __init__(self):
        self._params = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def merge(self, other):
        for p in other.all():
            if p.name in self._params:
                raise ValueError(f"duplicate parameter name: {p.name}")
            self._params[p.name] = p

    def all(self):
        return list(self._params.values())

    def arrays(self):
        return {name: p.data for name, p in self._params.items()}

    def load_arrays(self, named, prefix=""):
        """Assign stored arrays to matching parameters, shape-checked."""
        for name, p in self._params.items():
            key = prefix + name
            if key not in named:
                raise KeyError(f"checkpoint is missing parameter {key}")
            arr = named[key]
            if arr.shape != p.data.shape:
                raise ValueError(f"{key}: checkpoint shape {arr.shape} vs model {p.data.shape}")
            p.data = np.array(arr, dtype=np.float64)

    def __len__(self):
        return len(self._params)


def xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def embedding_init(rng, rows, dim):
    return rng.normal(0.0, 0.02, size=(rows, dim))


class Linear:
    def __init__(self, params, prefix, rng, fan_in, fan_out):
        self.w = params.add(f"{prefix}.w", xavier_uniform(rng, fan_in, fan_out))
        self.b = params.add(f"{prefix}.b", np.zeros(fan_out))

    def __call__(self, x):
        return T.add(T.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, params, prefix, dim, eps=1e-5):
        self.gain = params.add(f"{prefix}.gain", np.ones(dim))
        self.bias = params.add(f"{prefix}.bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)


class MultiHeadSelfAttention:
    """Standard scaled dot-product self-attention over (B, L, d) inputs.

    ``mask`` is a boolean (B, L) array marking real positions; masked keys
    receive a large negative additive bias before the softmax.
    """

    def __init__(self, params, prefix, rng, dim, heads):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(params, f"{prefix}.wq", rng, dim, dim)
        self.wk = Linear(params, f"{prefix}.wk", rng, dim, dim)
        self.wv = Linear(params, f"{prefix}.wv", rng, dim, dim)
        self.wo = Linear(params, f"{prefix}.wo", rng, dim, dim)

    def _split(self, x, b, m):
        # (B, L, d) -> (B, h, L, dh)
        return T.transpose(T.reshape(x, (b, m, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x, mask):
        b, m, _ = x.shape
        q = self._split(self.wq(x), b, m)
        k = self._split(self.wk(x), b, m)
        v = self._split(self.wv(x), b, m)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        bias = np.where(mask, 0.0, T.NEG_MASK)[:, None, None, :]
        scores = T.add(scores, T.constant(np.broadcast_to(bias, scores.shape).copy()))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, m, self.dim))
        return self.wo(merged)


class AdditiveAttention:
    """Attention pooling: e_i = v . tanh(W h_i + b), softmax over positions.

    Rows whose mask is entirely false pool to the zero vector.
    """

    def __init__(self, params, prefix, rng, dim, query_dim=None):
        query_dim = query_dim or dim
        self.proj = Linear(params, f"{prefix}.proj", rng, dim, query_dim)
        self.v = params.add(f"{prefix}.v", xavier_uniform(rng, query_dim, 1))

    def __call__(self, x, mask):
        b, m, _ = x.shape
        scores = T.reshape(T.matmul(T.tanh(self.proj(x)), self.v), (b, m))
        bias = np.where(mask, 0.0, T.NEG_MASK)
        alpha = T.softmax(T.add(scores, T.constant(bias)), axis=1)
        pooled = T.tsum(T.rowscale(x, T.reshape(alpha, (b, m, 1))), axis=1)
        any_real = mask.any(axis=1, keepdims=True).astype(np.float64)
        return T.rowscale(pooled, T.constant(any_real))
