"""Define-by-run reverse-mode automatic differentiation on float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients. :func:`backward` walks
the recorded graph in reverse topological order and accumulates gradients into
leaf tensors created with ``requires_grad=True``.

Only what the models need is here: affine layers, pointwise nonlinearities,
reductions, log-sum-exp over the particle axis and weighted sums whose weights
never receive gradient.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "as_tensor",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "neg",
    "square",
    "matmul",
    "affine",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sum",
    "mean",
    "weighted_sum",
    "logsumexp",
    "broadcast_to",
    "reshape",
    "transpose",
    "concat",
    "backward",
    "no_grad",
]

_state = threading.local()


@contextmanager
def no_grad():
    """Within this block (on this thread) operations record no graph."""
    prev = getattr(_state, "off", False)
    _state.off = True
    try:
        yield
    finally:
        _state.off = prev


class ShapeError(ValueError):
    """Input shapes are incompatible for the requested op."""


class Tensor:
    """Dense float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by exp(-log x)")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _slice(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x) -> Tensor:
    """Constant view of ``x``: shares data, carries no gradient."""
    x = as_tensor(x)
    out = Tensor(x.data)
    out.op = "stop_gradient"
    return out


def _make(data, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if not getattr(_state, "off", False) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {' and '.join(map(str, shapes))}") from None


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for a in axes:
        g = np.expand_dims(g, a)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _make(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _make(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), "mul", grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "negate", lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(y, (a,), "softplus", lambda g: (g * _sigmoid(x),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), "exp", lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        y = np.log(a.data)
    return _make(y, (a,), "log", lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast batch dims of {a.shape} and {b.shape}") from None
    out = out2
    if a.ndim == 1:
        out = out.squeeze(-2)
    if b.ndim == 1:
        out = out.squeeze(-1)

    def grad_fn(g):
        g2 = g.reshape(out2.shape)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", grad_fn)


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (..., n_in), ``W`` (n_in, n_out), ``b`` (n_out,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[1],) or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: incompatible shapes x{x.shape}, W{W.shape}, b{b.shape}")
    out = x.data @ W.data + b.data

    def grad_fn(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = gb = None
        if W.requires_grad:
            gW = x.data.reshape(-1, W.shape[0]).T @ g.reshape(-1, W.shape[1])
        if b.requires_grad:
            gb = g.reshape(-1, W.shape[1]).sum(axis=0)
        return gx, gW, gb

    return _make(out, (x, W, b), "affine", grad_fn)


# ---------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    return _make(
        a.data.sum(axis=axes, keepdims=keepdims),
        (a,),
        "sum",
        lambda g: (np.broadcast_to(_expand_reduced(g, axes, keepdims), shape),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape
    return _make(
        a.data.mean(axis=axes, keepdims=keepdims),
        (a,),
        "mean",
        lambda g: (np.broadcast_to(_expand_reduced(g, axes, keepdims), shape) / count,),
    )


def weighted_sum(a, weights, axis: int = -1) -> Tensor:
    """Sum of ``a * weights`` over ``axis``; ``weights`` never receive gradient.

    ``weights`` may be a Tensor, but only its data is read.
    """
    a = as_tensor(a)
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    _broadcast_shape("weighted_sum", a.shape, w.shape)
    if np.broadcast_shapes(a.shape, w.shape) != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} would enlarge values {a.shape}")
    ax = axis % a.ndim
    out = (a.data * w).sum(axis=ax)
    return _make(out, (a,), "weighted_sum", lambda g: (np.expand_dims(g, ax) * w,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) over ``axis``, shifted by the max so it never overflows."""
    a = as_tensor(a)
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.exp(a.data - m).sum(axis=ax, keepdims=True)) + m
    out = s if keepdims else s.squeeze(ax)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        with np.errstate(invalid="ignore"):
            soft = np.exp(a.data - s)
        return (np.nan_to_num(soft) * gk,)

    return _make(out, (a,), "logsumexp", grad_fn)


# ---------------------------------------------------------------------------
# shape manipulation


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if _broadcast_shape("broadcast", a.shape, shape) != shape:
        raise ShapeError(f"broadcast: {a.shape} does not broadcast to {shape}")
    return _make(np.broadcast_to(a.data, shape), (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), "transpose", lambda g: (np.swapaxes(g, -1, -2),))


def _slice(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), "slice", grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {ax}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        "concat",
        lambda g: tuple(np.split(g, sizes, axis=ax)),
    )


# ---------------------------------------------------------------------------
# graph + backward


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Graph:
    """Insertion-ordered record of the differentiable ops that produced ``output``.

    Node ids are positions in topological order, so every node's inputs have
    smaller ids than the node itself.
    """

    output: Tensor
    tensors: list[Tensor] = field(default_factory=list)
    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        order = _topological(self.output)
        ids = {id(t): i for i, t in enumerate(order)}
        self.tensors = order
        self.nodes = [
            Node(t.op, tuple(ids[id(p)] for p in t.parents if p.requires_grad), ids[id(t)])
            for t in order
        ]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.tensors if t.is_leaf]


def _topological(root: Tensor) -> list[Tensor]:
    # iterative DFS: deep graphs must not hit the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in reversed(t.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> list[Tensor]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf reachable from ``loss``.

    Returns those leaves. The graph is consumed unless ``retain_graph``.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return []
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaves: list[Tensor] = []
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if t.is_leaf:
            if g is not None:
                g = np.broadcast_to(g, t.shape)
                t.grad = np.array(g) if t.grad is None else t.grad + g
            leaves.append(t)
            continue
        if g is None:
            continue
        for p, gp in zip(t.parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    if not retain_graph:
        for t in graph.tensors:
            if not t.is_leaf:
                t.parents = ()
                t._backward = None
                t.requires_grad = False
    return leaves
