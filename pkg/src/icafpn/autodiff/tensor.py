"""Reverse-mode tensor core.

A :class:`Tensor` wraps a numpy array and, when gradients are required,
remembers the operation that produced it.  :func:`backward` walks the
recorded graph in reverse topological order and accumulates gradients into
leaf tensors (parameters and inputs marked ``requires_grad``).

Feature maps are rank-4 ``(n, c, h, w)`` arrays.  Some internal
intermediates (attention neighbourhoods, per-pixel logits) carry other ranks;
the ops below do not care.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True

DTYPES = {32: np.float32, 64: np.float64}


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name", "id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name
        self.id = next(_ids)

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    # ---- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge if any parent needs grads."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _promote(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---- graph + backward --------------------------------------------------------


@dataclass
class Node:
    op: str
    input_ids: tuple[int, ...]
    output_id: int


@dataclass
class Graph:
    """Operation records reachable from a root, in topological order."""

    tensors: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.id in seen:
                continue
            seen.add(t.id)
            stack.append((t, True))
            for p in t.parents:
                if p.id not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def nodes(self) -> list[Node]:
        return [Node(t.op, tuple(p.id for p in t.parents), t.id) for t in self.tensors]

    def is_topological(self) -> bool:
        pos = {t.id: i for i, t in enumerate(self.tensors)}
        return all(pos[p.id] < pos[t.id] for t in self.tensors for p in t.parents)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf needing it.

    Leaf gradients add up across calls until cleared with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_root(loss)
    if not loss.requires_grad:
        return graph
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if t.backward_fn is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.backward_fn(g)
        for p, pg in zip(t.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                pg = unbroadcast(pg, p.shape)
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return graph


# ---- elementwise + reductions ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _promote(a, b)
    return make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _promote(a, b)
    return make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _promote(a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _promote(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return make(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) = -softplus(-x), stable for large |x|."""
    xd = x.data
    out = np.minimum(xd, 0) - np.log1p(np.exp(-np.abs(xd)))
    sig_neg = np.exp(out - xd)  # sigmoid(-x) = exp(log_sigmoid(x) - x)
    return make(out, (x,), lambda g: (g * sig_neg,), "log_sigmoid")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return make(out, (x,), bw, "gelu")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _promote(a, b)
    pick_a = a.data <= b.data
    return make(np.minimum(a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a), "minimum")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _promote(a, b)
    pick_a = a.data >= b.data
    return make(np.maximum(a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a), "maximum")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    basic = all(isinstance(i, (slice, int)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make(np.asarray(x.data[idx]), (x,), bw, "index")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _promote(a, b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dims {ad.shape} @ {bd.shape}")

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return make(ad @ bd, (a, b), bw, "matmul")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in xs]}") from exc
    return make(data, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    out = []
    start = 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        out.append(index(x, tuple(sl)))
        start += s
    return out


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0.

    Every slice must keep at least one unmasked entry.
    """
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make(out, (x,), bw, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)
