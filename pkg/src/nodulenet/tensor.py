"""Dense N-d tensors with reverse-mode automatic differentiation.

Every differentiable operation creates a :class:`Node` holding its inputs and a
backward rule. Nodes carry a global creation sequence number, so the set of
nodes reachable from a loss, sorted by that number, is a valid topological
order. :class:`Tape` materializes that ordered list for one backward pass; it
is discarded afterwards together with the graph.

Volumes use the axis order ``[batch, channel, x, y, z]`` throughout.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_sequence = itertools.count()
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """A floating-point array that can participate in a gradient graph.

    ``data`` is a contiguous numpy array of dtype float32 or float64. Values
    are treated as immutable once created; only ``grad`` is written by
    :func:`backward` (and ``data`` by an optimizer step on leaf parameters).
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in FLOAT_DTYPES else np.float32
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = _contiguous(arr.astype(dtype, copy=False))
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t._node = None
    t.name = None
    return t


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and, if any input requires grad, attach its node.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced NaN or Inf")
    out = _wrap(_contiguous(np.asarray(data)))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


# -- tape & backward ------------------------------------------------------


class Tape:
    """Ordered list of ``(node, output)`` pairs reachable from one output.

    Entries are in creation order, so every entry's inputs were produced by
    earlier entries or are leaves.
    """

    def __init__(self, entries: list[tuple[Node, Tensor]]):
        self.entries = entries

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        entries: list[tuple[Node, Tensor]] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            entries.append((t._node, t))
            stack.extend(t._node.inputs)
        entries.sort(key=lambda e: e[0].seq)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [node.op for node, _ in self.entries]


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.asarray(g, dtype=t.dtype)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients accumulate additively, both across fan-out within the graph and
    across repeated calls on leaf tensors.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on a tape (no input requires grad)")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        _accumulate(loss, seed)
        return
    tape = Tape.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node, out in reversed(tape.entries):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        _accumulate(out, g)
        grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, ig)
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + ig
            else:
                pending[id(inp)] = ig


# -- elementwise ----------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "multiply")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("multiply", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "divide")
    if np.any(b.data == 0):
        raise DomainError("divide: division by zero")

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record("divide", a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return record("negate", -a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # branch-free stable logistic: exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    return record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value is inside."""
    mask = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return record("clip", out, (a,), lambda g: (g * mask,))


# -- structural -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all axes after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return record("reduce-sum", np.asarray(out), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return record("reduce-mean", np.asarray(out), (a,), bw)


def _first_max_mask(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    """Boolean mask selecting the first maximal element (scan order) per reduction."""
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.transpose(x, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(onehot, idx[..., None], True, axis=-1)
    onehot = onehot.reshape(moved.shape)
    return np.transpose(onehot, np.argsort(keep + list(axes)))


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=keepdims)

    def bw(g):
        mask = _first_max_mask(a.data, axes)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (mask * g,)

    return record("max", np.asarray(out), (a,), bw)


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "multiply": mul,
    "divide": div,
    "matmul": matmul,
    "reshape": reshape,
    "concat": lambda *ts, axis=1: concat(ts, axis=axis),
    "reduce-sum": reduce_sum,
    "reduce-mean": reduce_mean,
    "max": reduce_max,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "square": square,
    "sqrt": sqrt,
    "clip": clip,
}


def forward_op(op_kind: str, inputs: Iterable[Tensor], **kwargs) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("add", [a, b])``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)
