"""Small define-by-run reverse-mode autodiff over numpy arrays.

Storage is float32 by default. Reductions and matrix products accumulate in
float64 and round back to the storage dtype, and all gradients are carried
in float64 until they land on a leaf. Float64 tensors are supported end to
end, which is what the finite-difference checks use.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateEmbedding,
    GraphAlreadyConsumed,
    NonFiniteError,
    NonScalarLoss,
    ShapeMismatch,
)

_ids = itertools.count()
_grad_enabled = True

NORM_EPS = 1e-12


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A dense float array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.array(arr, dtype=dtype, copy=True)
        _check_finite(arr, "construction")
        self.data = _frozen(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = _frozen(data)
        out.grad = None
        out.op = op
        out._id = next(_ids)
        out._consumed = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
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

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis):
        return tmax(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # reverse pass
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self._consumed:
            raise GraphAlreadyConsumed("backward() already ran through this graph")
        if self.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo(self)
        grads: dict[int, np.ndarray] = {self._id: np.ones(self.shape, dtype=np.float64)}
        for node in order:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _topo(root: Tensor) -> list[Tensor]:
    """Reachable nodes, consumers before producers (ids are creation order)."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in seen:
            continue
        seen[n._id] = n
        stack.extend(n._parents)
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.dtype for t in ts])


# elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = (a.data + b.data).astype(_result_dtype(a, b), copy=False)
    return Tensor._from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = (a.data - b.data).astype(_result_dtype(a, b), copy=False)
    return Tensor._from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = (a.data * b.data).astype(_result_dtype(a, b), copy=False)

    def back(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), back, "mul")


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from e
    return a, b


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor._from_op(out, (x,), lambda g: (np.where(out > 0, g, 0.0),), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data.astype(np.float64))
    return Tensor._from_op(out.astype(x.dtype), (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data.astype(np.float64))
    return Tensor._from_op(out.astype(x.dtype), (x,), lambda g: (g / x.data.astype(np.float64),), "log")


# shape ops

def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D tensor")
    return Tensor._from_op(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def index(x: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros(x.shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.array(x.data[idx]), (x,), back, "index")


# reductions

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(count))


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max over one axis. The subgradient goes to the first maximal element."""
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros(x.shape, dtype=np.float64)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), back, "max")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stabilized log-sum-exp along ``axis`` (max subtracted before exp)."""
    z = x.data.astype(np.float64)
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s

    def back(g):
        return (np.expand_dims(g, axis) * soft,)

    return Tensor._from_op(out.astype(x.dtype), (x,), back, "logsumexp")


# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for a of shape (k,) or (m, k) and b of shape (k, n)."""
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = (a64 @ b64).astype(_result_dtype(a, b))

    def back(g):
        ga = g @ b64.T if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif a.ndim == 1:
            gb = np.outer(a64, g)
        else:
            gb = a64.T @ g
        return ga, gb

    return Tensor._from_op(out, (a, b), back, "matmul")


def similarity(a: Tensor, b: Tensor, scale: Tensor | float = 1.0) -> Tensor:
    """Scaled dot-product matrix ``scale * a @ b.T`` between two row sets."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"similarity: incompatible shapes {a.shape} and {b.shape}")
    scale_t = scale if isinstance(scale, Tensor) else Tensor(np.asarray(scale, dtype=a.dtype))
    if scale_t.data.size != 1:
        raise ShapeMismatch("similarity scale must be a scalar")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    c = float(scale_t.data.reshape(-1)[0])
    dots = a64 @ b64.T
    out = (dots * c).astype(_result_dtype(a, b, scale_t))

    def back(g):
        ga = c * (g @ b64) if a.requires_grad else None
        gb = c * (g.T @ a64) if b.requires_grad else None
        gs = np.asarray((g * dots).sum()).reshape(scale_t.shape) if scale_t.requires_grad else None
        return ga, gb, gs

    return Tensor._from_op(out, (a, b, scale_t), back, "similarity")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale ``x`` to unit Euclidean norm along ``axis``."""
    x64 = x.data.astype(np.float64)
    n = np.sqrt((x64 * x64).sum(axis=axis, keepdims=True))
    if np.any(n <= NORM_EPS):
        raise DegenerateEmbedding("cannot normalize a (near) zero vector")
    y = x64 / n

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return Tensor._from_op(y.astype(x.dtype), (x,), back, "l2_normalize")


def cross_entropy(logits: Tensor, targets: Iterable[int], reduction: str = "sum") -> Tensor:
    """Softmax cross-entropy of 2-D ``logits`` against integer class targets."""
    if logits.ndim != 2:
        raise ShapeMismatch("cross_entropy expects (n, classes) logits")
    t = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets, dtype=np.int64)
    n = logits.shape[0]
    if t.shape != (n,):
        raise ShapeMismatch(f"expected {n} targets, got {t.shape}")
    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = z - m - np.log(s)
    per = -logp[np.arange(n), t]
    soft = e / s
    if reduction == "none":
        out = per
    elif reduction == "sum":
        out = per.sum()
    elif reduction == "mean":
        out = per.mean()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        d = soft.copy()
        d[np.arange(n), t] -= 1.0
        if reduction == "none":
            return (d * g[:, None],)
        if reduction == "mean":
            g = g / n
        return (d * g,)

    return Tensor._from_op(np.asarray(out, dtype=logits.dtype), (logits,), back, "cross_entropy")
