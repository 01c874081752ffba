"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation on a tensor that requires gradients records its parents and a
closure computing the vector-Jacobian product.  ``backward`` walks the recorded
graph once in reverse topological order and accumulates into the ``grad``
buffer of each leaf.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

# Row-block size for 2-D matmul.  Every block is padded to this many rows so
# BLAS always sees the same problem shape and per-row results do not depend on
# what else is in the batch.
ROW_BLOCK = 64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic accessors -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", _as_tensor(other), self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", _as_tensor(other), self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _as_tensor(other), self)

    def __neg__(self):
        return elementwise("mul", self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    # -- unary helpers ---------------------------------------------------
    def relu(self):
        return elementwise("relu", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def tanh(self):
        return elementwise("tanh", self)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def abs(self):
        return elementwise("abs", self)

    def softplus(self):
        return elementwise("softplus", self)

    def clampmin(self, eps: float):
        return clampmin(self, eps)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``out`` as a tensor and, if needed, attach it to the tape.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    t.requires_grad = needs
    if needs:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


_UNARY = {"relu", "sigmoid", "tanh", "exp", "log", "abs", "softplus"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Apply a named elementwise op; binary ops broadcast numpy-style."""
    a = _as_tensor(a)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        x = a.data
        if op == "relu":
            out = np.maximum(x, 0.0)
            fn = lambda g: (g * (x > 0),)
        elif op == "sigmoid":
            out = _sigmoid(x)
            fn = lambda g: (g * out * (1.0 - out),)
        elif op == "tanh":
            out = np.tanh(x)
            fn = lambda g: (g * (1.0 - out * out),)
        elif op == "exp":
            out = np.exp(x)
            fn = lambda g: (g * out,)
        elif op == "log":
            out = np.log(x)
            fn = lambda g: (g / x,)
        elif op == "abs":
            out = np.abs(x)
            fn = lambda g: (g * np.sign(x),)
        else:  # softplus
            out = _softplus(x)
            fn = lambda g: (g * _sigmoid(x),)
        return record(out, (a,), fn, op)

    if op == "clampmin":
        return clampmin(a, float(b))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise TypeError(f"{op} needs two operands")
    b = _as_tensor(b)
    x, y = a.data, b.data
    _broadcast_shape(x.shape, y.shape)
    sa, sb = x.shape, y.shape
    if op == "add":
        out = x + y
        fn = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    elif op == "sub":
        out = x - y
        fn = lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    elif op == "mul":
        out = x * y
        fn = lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb))
    else:
        out = x / y
        fn = lambda g: (_unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb))
    return record(out, (a, b), fn, op)


def clampmin(a: Tensor, eps: float) -> Tensor:
    """max(a, eps); gradient passes only where a > eps."""
    x = a.data
    out = np.maximum(x, eps)
    return record(out, (a,), lambda g: (g * (x > eps),), "clampmin")


def blocked_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` computed in fixed-size, zero-padded row blocks."""
    rows = a.shape[0]
    if rows == 0:
        return np.zeros((0, b.shape[1]))
    n_blocks = -(-rows // ROW_BLOCK)
    padded = n_blocks * ROW_BLOCK
    if padded != rows:
        a = np.concatenate([a, np.zeros((padded - rows, a.shape[1]))], axis=0)
    out = np.empty((padded, b.shape[1]))
    for i in range(0, padded, ROW_BLOCK):
        np.matmul(a[i:i + ROW_BLOCK], b, out=out[i:i + ROW_BLOCK])
    return out[:rows]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = blocked_matmul(x, y)

    def fn(g):
        ga = g @ y.T if a.requires_grad else None
        gb = x.T @ g if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), fn, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(out, dtype=DTYPE), (a,), fn, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return record(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape = a.shape

    basic = all(isinstance(i, (int, slice, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def fn(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record(np.array(out, dtype=DTYPE), (a,), fn, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[x.shape for x in arrs]}") from None
    splits = np.cumsum([x.shape[axis] for x in arrs])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tensors, fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return record(out, tensors, fn, "stack")


# -- graph traversal -------------------------------------------------------
@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Graph:
    """Recorded operations reachable from a root, in topological order."""

    nodes: list[Node] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.nodes)


def trace(root: Tensor) -> Graph:
    """Topologically order every tensor reachable from ``root``.

    Iterative DFS so deep recurrent unrolls cannot hit the recursion limit.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    nodes = [Node(t.op, tuple(id(p) for p in t._parents), id(t)) for t in order]
    return Graph(nodes, order)


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=DTYPE).reshape(loss.shape)
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any tensor that requires grad")
    graph = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): grad}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- serialization ---------------------------------------------------------
def serialize_array(arr: np.ndarray) -> bytes:
    """u32 ndim, ndim x u64 dims, then little-endian float64 data."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def deserialize_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    if offset + 4 > len(buf):
        raise ValueError(f"unexpected end of stream at offset {offset}")
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if offset + 8 * ndim > len(buf):
        raise ValueError(f"unexpected end of stream at offset {offset}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    nbytes = 8 * count
    if offset + nbytes > len(buf):
        raise ValueError(f"unexpected end of stream at offset {offset}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(DTYPE)
    return arr, offset + nbytes
