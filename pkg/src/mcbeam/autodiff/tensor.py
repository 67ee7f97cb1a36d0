"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in the toolkit flows through :class:`Tensor`.
A tensor created with ``requires_grad=True`` is a leaf; any op with at least
one tracked input records its parents and a vector-Jacobian closure on the
output. :func:`backward` replays the recorded graph once, in reverse creation
order, and returns the gradient of a scalar loss for every reachable leaf.

The graph is rebuilt for each loss evaluation and dropped afterwards, so a
tensor graph must not be shared between threads.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "Tape",
    "as_tensor",
    "backward",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "swapaxes",
    "reshape",
    "concat",
    "stack",
    "tsum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "tanh",
    "relu",
    "maximum",
    "softmax",
    "log_softmax",
    "logsumexp",
]

_node_ids = itertools.count(1)


class ShapeError(ValueError):
    """Operand shapes do not conform for the named op."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """Input lies outside the real domain of the op (log or sqrt of a negative)."""


class _Scatter:
    # Gradient of an indexing op: added into the parent's buffer at `index`.
    __slots__ = ("index", "value", "basic")

    def __init__(self, index, value: np.ndarray, basic: bool):
        self.index = index
        self.value = value
        self.basic = basic


class Tensor:
    """Dense float64 array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_backward", "name")
    __array_priority__ = 100.0
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> Tensor:
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary --------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


# -- shape ops -----------------------------------------------------------
def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes) if a.ndim else ()
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    """Slicing and gather (numpy basic or advanced indexing)."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError("slice", a.shape, detail=str(exc)) from None
    basic = _is_basic_index(index)
    if basic:
        out = out.copy()

    def vjp(g):
        return (_Scatter(index, g, basic),)

    return _record(np.asarray(out, dtype=np.float64), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl[ax] = slice(lo, hi)
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return tuple(grads)

    return _record(out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack", detail="no inputs")
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise ShapeError("stack", *[t.shape for t in ts])
    ax = axis % (len(shape) + 1)
    expanded = [reshape(t, shape[:ax] + (1,) + shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


# -- reductions ----------------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) / float(n)


# -- elementwise unary ---------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"log: negative input (min {a.data.min():.3g})")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: negative input (min {a.data.min():.3g})")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    return maximum(a, 0.0)


def maximum(a, c: float) -> Tensor:
    """Elementwise max against a constant; the gradient is zero where the constant wins."""
    a = as_tensor(a)
    keep = a.data > c
    return _record(np.where(keep, a.data, c), (a,), lambda g: (g * keep,))


def _safe_max(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0:
        raise ShapeError("logsumexp", a.shape)
    m = _safe_max(a.data, axis)
    with np.errstate(divide="ignore"):
        out_k = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))

    def vjp(g):
        w = np.exp(a.data - out_k)
        return (np.expand_dims(g, axis) * w,)

    return _record(np.squeeze(out_k, axis=axis), (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = _safe_max(a.data, axis)
    lse = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))
    out = a.data - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = _safe_max(a.data, axis)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


# -- reverse pass --------------------------------------------------------
class Tape:
    """Topologically ordered record of the ops reachable from one loss."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes = self._collect(loss)

    @staticmethod
    def _collect(root: Tensor) -> list[Tensor]:
        if not root.requires_grad:
            return []
        seen = {root.node_id: root}
        stack = [root]
        while stack:
            node = stack.pop()
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    seen[p.node_id] = p
                    stack.append(p)
        # ids grow with creation time, so parents always precede children
        return [seen[k] for k in sorted(seen)]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def run(self) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {}
        if not self.nodes:
            return grads
        grads[self.loss.node_id] = np.ones(self.loss.shape)
        leaves: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if node.is_leaf:
                leaves[node.node_id] = g if g is not None else np.zeros(node.shape)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _accumulate(grads, parent, pg)
        return leaves


def _accumulate(grads: dict, parent: Tensor, pg) -> None:
    key = parent.node_id
    if isinstance(pg, _Scatter):
        buf = grads.get(key)
        if buf is None:
            buf = grads[key] = np.zeros(parent.shape)
        if pg.basic:
            buf[pg.index] += pg.value
        else:
            np.add.at(buf, pg.index, pg.value)
        return
    buf = grads.get(key)
    if buf is None:
        # copy: vjps may hand back views of saved forward arrays
        grads[key] = np.array(pg, dtype=np.float64)
    else:
        buf += pg


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    """Gradient map ``{node_id: dloss/dleaf}`` for every tracked leaf.

    Leaves passed explicitly but unreachable from ``loss`` get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    raw = Tape(loss).run()
    out = {k: Tensor(v) for k, v in raw.items()}
    for leaf in leaves or ():
        if leaf.requires_grad and leaf.node_id not in out:
            out[leaf.node_id] = Tensor(np.zeros(leaf.shape))
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt``, as plain arrays."""
    gmap = backward(loss, wrt)
    return [gmap[t.node_id].data if t.requires_grad else np.zeros(t.shape) for t in wrt]
