"""Dense tensors with tape-free reverse-mode differentiation and Adam.

Every op returns a new :class:`Tensor`; when any input requires a gradient
the result keeps references to its inputs plus a closure mapping the output
gradient to input gradients.  Tensors carry a monotonically increasing
creation id, so sorting the reachable nodes by id reproduces the order in
which the graph was appended to, which is a valid topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "AdamState", "Adam", "no_grad", "grad_enabled",
    "set_precision", "get_dtype", "tensor", "matmul", "add", "mul", "softmax",
    "log_softmax", "activation", "tanh", "sigmoid", "relu", "leaky_relu",
    "exp", "log", "concat", "stack", "take", "stop_gradient",
    "straight_through", "backward", "grad_check", "adam_step", "lr_at_epoch",
]

_ids = itertools.count()
_state = threading.local()
_dtype = np.float64

LEAKY_SLOPE = 0.01


def set_precision(name: str) -> None:
    """Switch the default dtype: ``"float64"`` (tests) or ``"float32"`` (fast)."""
    global _dtype
    if name not in ("float64", "float32"):
        raise ValueError(f"unknown precision {name!r}")
    _dtype = np.dtype(name).type


def get_dtype():
    return _dtype


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_id", "_inputs", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._id = next(_ids)
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- introspection --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}{nm})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor, clamp: float = 0.0) -> Tensor:
    """Natural log; ``clamp`` > 0 floors the argument (gradient is zero below it)."""
    x = a.data
    if clamp > 0:
        safe = np.maximum(x, clamp)
        live = x > clamp
        return _make(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))
    return _make(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    live = a.data > 0
    return _make(np.where(live, a.data, 0.0), (a,), lambda g: (g * live,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def activation(x: Tensor, kind: str, slope: float | None = None) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "leaky_relu":
        return leaky_relu(x, LEAKY_SLOPE if slope is None else slope)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad = a.data if a.ndim > 1 else a.data[None, :]
    bd = b.data if b.ndim > 1 else b.data[:, None]
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out2 = ad @ bd
    shape = out2.shape
    if a.ndim == 1:
        shape = shape[:-2] + shape[-1:]
    if b.ndim == 1:
        shape = shape[:-1]
    a_shape, b_shape = a.shape, b.shape

    def bw(g):
        g2 = g.reshape(out2.shape)
        ga = _unbroadcast(g2 @ np.swapaxes(bd, -1, -2), ad.shape).reshape(a_shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g2, bd.shape).reshape(b_shape)
        return ga, gb

    return _make(out2.reshape(shape), (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def index(a: Tensor, idx) -> Tensor:
    src_shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def take(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding gather)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n}): {ids.min()}..{ids.max()}")
    return index(table, ids)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward ``hard`` exactly, route the backward pass through ``soft``."""
    return _make(np.asarray(hard, dtype=soft.data.dtype), (soft,), lambda g: (g,))


# ---------------------------------------------------------------------------
# normalisers
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; ``mask`` (bool, broadcastable) excludes entries."""
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax mask removes every entry of a slice")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """Reachable op records of a scalar loss, in append (creation) order."""

    nodes: list[Tensor]

    @classmethod
    def from_loss(cls, loss: Tensor) -> Graph:
        seen: dict[int, Tensor] = {}
        todo = [loss]
        while todo:
            t = todo.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            todo.extend(t._inputs)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._backward is None]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every grad-requiring leaf.

    Leaves listed in ``params`` that the loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_loss(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            result[node] = g
            continue
        for inp, gi in zip(node._inputs, node._backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp._id)
            grads[inp._id] = gi if prev is None else prev + gi
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               scale: str = "coord") -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` rebuilds the loss from the current parameter values on every call.
    With ``max_coords`` set, that many coordinates per parameter are sampled.
    ``scale="tensor"`` divides each coordinate's error by the largest autodiff
    gradient of its parameter, ``scale="global"`` by the largest over all
    parameters, so difference error on near-zero coordinates is not mistaken
    for a wrong gradient.
    """
    if scale not in ("coord", "tensor", "global"):
        raise ValueError(f"scale must be 'coord', 'tensor' or 'global', got {scale!r}")
    params = list(params)
    ad = backward(f(), params)
    worst = 0.0
    g_all = max((float(np.abs(g).max()) for g in ad.values() if g.size), default=0.0)
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        g_ad = ad[p].reshape(-1)
        g_max = float(np.abs(g_ad).max()) if g_ad.size else 0.0
        if scale == "global":
            g_max = g_all
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss near {p.name or 'param'}[{c}]")
            g_fd = (fp - fm) / (2 * h)
            denom = max(abs(g_ad[c]), abs(g_fd), 1e-8)
            if scale != "coord":
                denom = max(denom, g_max)
            worst = max(worst, abs(g_ad[c] - g_fd) / denom)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, rebinding each parameter's data.

    A non-finite gradient aborts the whole step before anything is touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 5e-4, state: AdamState | None = None):
        self.params = params
        self.state = state or AdamState(lr=lr)

    def step(self, grads_by_tensor: dict[Tensor, np.ndarray]) -> None:
        named = {n: grads_by_tensor[p] for n, p in self.params.items() if p in grads_by_tensor}
        adam_step(self.params, named, self.state)


def lr_at_epoch(epoch: int, init: float = 5e-4, decay: float = 0.8, every: int = 5) -> float:
    """Step decay: ``init * decay ** (epoch // every)`` with 0-based epochs."""
    return init * decay ** (epoch // every)
