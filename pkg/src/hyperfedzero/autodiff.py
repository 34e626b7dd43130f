"""Dense float64 tensors with tape-based reverse-mode differentiation.

The graph is built eagerly as operations run and thrown away after each
``backward`` call. Only tensors that (transitively) depend on a leaf created
with ``requires_grad=True`` record their parents, so evaluation code that
works on plain constants never builds a tape.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class _Counters:
    """Process-wide instrumentation, safe to bump from worker threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.backward_calls = 0

    def bump_backward(self):
        with self._lock:
            self.backward_calls += 1

    def reset(self):
        with self._lock:
            self.backward_calls = 0


COUNTERS = _Counters()

_Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        if op == "leaf" or not isinstance(data, np.ndarray) or data.dtype != np.float64:
            arr = np.array(data, dtype=np.float64)
        else:
            arr = data
        # a finite sum implies finite entries; fall back to the exact test on overflow
        if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by '{op}'")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: _Backward | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: _Backward, op: str) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, False, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise binary

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# reductions and shape plumbing

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def take(a, idx) -> Tensor:
    """Numpy-style indexing; repeated integer indices accumulate correctly."""
    a = as_tensor(a)

    basic = isinstance(idx, (slice, int)) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) or i is Ellipsis for i in idx))

    return _result(np.array(a.data[idx], dtype=np.float64), (a,), lambda g: (_IndexGrad(idx, g, basic),), "index")


class _IndexGrad:
    """Gradient that is zero outside ``idx``; scattered into the parent adjoint lazily."""

    __slots__ = ("idx", "g", "basic")

    def __init__(self, idx, g, basic):
        self.idx, self.g, self.basic = idx, g, basic

    def scatter_into(self, full: np.ndarray) -> np.ndarray:
        if self.basic:
            full[self.idx] += self.g
        else:
            np.add.at(full, self.idx, self.g)
        return full



def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# elementwise unary

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Tensor:
    """ln(1 + exp(v)) computed as ln(1 + exp(-|v|)) + max(v, 0)."""
    a = as_tensor(a)
    v = a.data
    out = np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


def xlogx(a) -> Tensor:
    """Elementwise x*ln(x) with the convention 0*ln(0) = 0.

    The derivative at exactly zero is taken as 0 rather than -inf.
    """
    a = as_tensor(a)
    pos = a.data > 0
    safe = np.where(pos, a.data, 1.0)
    out = np.where(pos, a.data * np.log(safe), 0.0)
    return _result(out, (a,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),), "xlogx")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax needs a non-empty last axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("log_softmax needs a non-empty last axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B x C)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects B x C logits, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    picked = take(log_softmax(logits), (np.arange(b), labels.astype(np.int64)))
    return -mean(picked)


# backward pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    COUNTERS.bump_backward()
    order = _topo_order(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if isinstance(pg, _IndexGrad):
                buf = adj.get(id(parent))
                # the buffer is owned by this pass once it comes from zeros/add
                if buf is None or id(parent) not in owned:
                    buf = np.zeros_like(parent.data) if buf is None else buf.copy()
                    owned.add(id(parent))
                adj[id(parent)] = pg.scatter_into(buf)
            elif id(parent) in adj:
                adj[id(parent)] = adj[id(parent)] + pg
                owned.add(id(parent))
            else:
                adj[id(parent)] = pg
    for node in order:
        if node._backward is None and node.grad is None:
            node.grad = np.zeros_like(node.data)


def grad(loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    leaves = list(leaves)
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def dump_csv(t, path) -> None:
    """Write a tensor as row-major values with 17 significant digits.

    The first line records the shape so the file can be compared against an
    independent oracle without guessing the layout.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# shape=" + "x".join(str(n) for n in arr.shape) + "\n")
        flat = arr.reshape(-1) if arr.ndim < 2 else arr.reshape(-1, arr.shape[-1])
        if arr.ndim < 2:
            fh.write(",".join(f"{v:.17g}" for v in flat) + "\n")
        else:
            for row in flat:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
