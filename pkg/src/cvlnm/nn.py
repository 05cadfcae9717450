"""Small layer library on top of :mod:`cvlnm.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def normal_init(rng: np.random.Generator, shape, std: float = 0.1) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Named-parameter container.

    Parameters are discovered by walking instance attributes in definition
    order, which keeps names and ordering stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(T.get_dtype())


class Linear(Module):
    """``y = x @ W + b`` with ``W`` of shape (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = uniform_init(rng, d_in, (d_in, d_out))
        self.b = zeros_param((d_out,)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"Linear expects last dim {self.d_in}, got input shape {x.shape}")
        y = T.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.table = normal_init(rng, (n, d))

    def __call__(self, ids) -> Tensor:
        return T.take(self.table, ids)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` parallel projections.

    Per head ``softmax(q W1_i (kv W2_i)^T / sqrt(scale_dim)) kv W3_i``; the
    heads are concatenated and projected by ``W_out``.  Per-head matrices
    are stored column-stacked, which is the same parameterisation.
    """

    def __init__(self, d_query: int, d_kv: int, heads: int, d_head: int, d_out: int,
                 rng: np.random.Generator, scale_dim: int | None = None):
        self.heads, self.d_head = heads, d_head
        self.scale = 1.0 / math.sqrt(scale_dim if scale_dim is not None else d_head)
        self.W1 = uniform_init(rng, d_query, (d_query, heads * d_head))
        self.W2 = uniform_init(rng, d_kv, (d_kv, heads * d_head))
        self.W3 = uniform_init(rng, d_kv, (d_kv, heads * d_head))
        self.W_out = uniform_init(rng, heads * d_head, (heads * d_head, d_out))

    def _split(self, x: Tensor) -> Tensor:
        # (..., L, H*dh) -> (..., H, L, dh)
        lead = x.shape[:-2]
        L = x.shape[-2]
        x = x.reshape(lead + (L, self.heads, self.d_head))
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return x.transpose(axes)

    def __call__(self, q: Tensor, kv: Tensor, key_mask: np.ndarray | None = None):
        """Returns ``(output, attention)``; attention has shape (..., H, Lq, Lk)."""
        Q = self._split(T.matmul(q, self.W1))
        K = self._split(T.matmul(kv, self.W2))
        V = self._split(T.matmul(kv, self.W3))
        scores = T.matmul(Q, K.transpose()) * self.scale
        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        att = T.softmax(scores, axis=-1, mask=mask)
        heads = T.matmul(att, V)
        nd = heads.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        merged = heads.transpose(axes)
        merged = merged.reshape(merged.shape[:-2] + (self.heads * self.d_head,))
        return T.matmul(merged, self.W_out), att


def sinusoid_position(pos: int, d: int) -> np.ndarray:
    """Sinusoidal positional code: sin on even dims, cos on odd dims."""
    i = np.arange(d)
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
