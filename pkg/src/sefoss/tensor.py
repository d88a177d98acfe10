"""Dense rank-2 tensors with reverse-mode differentiation.

Only the handful of primitives the training losses need are provided. Every
value is a float64 matrix; scalars are 1x1. Broadcasting is limited to adding
a 1xn row vector (a bias) to an mxn matrix, and to scalar constants.

A graph is consumed by ``backward``: intermediate nodes are released afterwards
and may not be reused, which keeps leaf gradients from being accumulated twice
by accident. Leaves (parameters) survive and can start new graphs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input lies where a primitive is undefined (e.g. a zero-norm row)."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph."""


# Test hook: name of a primitive whose adjoint is deliberately scaled wrong.
_corrupted_op: str | None = None


@contextlib.contextmanager
def corrupted_adjoint(op: str):
    """Scale the adjoint of ``op`` by 1.5 inside the block (mutation testing)."""
    global _corrupted_op
    previous = _corrupted_op
    _corrupted_op = op
    try:
        yield
    finally:
        _corrupted_op = previous


def _fudge(op: str) -> float:
    return 1.5 if _corrupted_op == op else 1.0


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} tensors are not supported")
    return arr


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.values = _as_matrix(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        """A constant copy cut from the graph (stop-gradient)."""
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self) -> "Tensor":
        return scale(reduce_sum(self), 1.0 / self.values.size)

    def relu(self) -> "Tensor":
        return relu(self)

    def square(self) -> "Tensor":
        return square(self)

    def backward(self) -> None:
        backward(self)


def _check_live(*tensors: Tensor) -> None:
    for t in tensors:
        if t._released:
            raise GraphError("tensor belongs to a graph that was already backpropagated")


def _make(values: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    _check_live(*parents)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._released = False
    tracked = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(tracked)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return np.array([[g.sum()]])
    if shape[0] == 1 and shape[1] == g.shape[1]:
        return g.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    if a == b or b == (1, 1):
        return a
    if a == (1, 1):
        return b
    if b[0] == 1 and a[1] == b[1]:
        return a
    if a[0] == 1 and a[1] == b[1]:
        return b
    raise ShapeError(f"incompatible shapes {a} and {b}")


def add(a, b) -> Tensor:
    a, b = _constant(a), _constant(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    a, b = _constant(a), _constant(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    """Elementwise product with the same broadcasting rules as ``add``."""
    a, b = _constant(a), _constant(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def square(a: Tensor) -> Tensor:
    av = a.values
    k = 2.0 * _fudge("square")
    return _make(av * av, (a,), lambda g: (k * av * g,))


def relu(a: Tensor) -> Tensor:
    active = a.values > 0.0
    k = _fudge("relu")
    return _make(np.where(active, a.values, 0.0), (a,), lambda g: (k * g * active,))


def max_with_constant(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c); the adjoint is zero where a <= c."""
    active = a.values > c
    k = _fudge("max_with_constant")
    return _make(np.where(active, a.values, float(c)), (a,), lambda g: (k * g * active,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    k = _fudge("matmul")

    def fn(g):
        ga = k * (g @ bv.T) if a.requires_grad else None
        gb = k * (av.T @ g) if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), fn)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum of all entries (1x1) or of each row (``axis=1``, mx1)."""
    if axis is None:
        return _make(np.array([[a.values.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))
    if axis == 1:
        return _make(a.values.sum(axis=1, keepdims=True), (a,),
                     lambda g: (np.broadcast_to(g, a.shape),))
    raise ValueError("axis must be None or 1")


def _lse_rows(v: np.ndarray) -> np.ndarray:
    shift = v.max(axis=1, keepdims=True)
    return shift + np.log(np.exp(v - shift).sum(axis=1, keepdims=True))


def row_log_sum_exp(a: Tensor) -> Tensor:
    """Stable log(sum(exp(a_ij))) over each row, shape mx1."""
    if a.shape[1] < 1:
        raise ShapeError("log-sum-exp over an empty row")
    out_values = _lse_rows(a.values)
    k = _fudge("row_log_sum_exp")
    return _make(out_values, (a,), lambda g: (k * g * np.exp(a.values - out_values),))


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of matching rows, shape mx1."""
    if a.shape != b.shape:
        raise ShapeError(f"row_cosine needs equal shapes, got {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    na = np.sqrt((av * av).sum(axis=1, keepdims=True))
    nb = np.sqrt((bv * bv).sum(axis=1, keepdims=True))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("row_cosine got a zero-norm row")
    cos = (av * bv).sum(axis=1, keepdims=True) / (na * nb)
    k = _fudge("row_cosine")

    def fn(g):
        ga = k * g * (bv / (na * nb) - cos * av / (na * na)) if a.requires_grad else None
        gb = k * g * (av / (na * nb) - cos * bv / (nb * nb)) if b.requires_grad else None
        return ga, gb

    return _make(cos, (a, b), fn)


_UNARY = {"relu": relu, "square": square}


def elementwise(a: Tensor, kind: str, other=None) -> Tensor:
    """Dispatch by name: relu, add, sub, scale, square, max_with_constant."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "add":
        return add(a, other)
    if kind == "sub":
        return sub(a, other)
    if kind == "scale":
        return scale(a, other)
    if kind == "max_with_constant":
        return max_with_constant(a, 0.0 if other is None else other)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf, then release the graph."""
    if root.shape != (1, 1):
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    _check_live(root)
    if not root.requires_grad:
        return

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

    adjoints: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adjoints[key] = adjoints[key] + pg if key in adjoints else pg
        node._released = True
        node._backward = None
        node._parents = ()


def grad_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray],
               eps: float = 1e-5,
               numeric_fn: Callable[[Mapping[str, np.ndarray]], float] | None = None) -> float:
    """Worst relative error between backprop and central differences.

    ``loss_fn`` receives leaf tensors and returns a scalar tensor. The numeric
    side perturbs each entry by +-eps; it calls ``numeric_fn`` on raw arrays
    when given (for losses whose stop-gradient targets must be held fixed),
    otherwise ``loss_fn``. Relative error uses max(|analytic|, |numeric|, 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    root = loss_fn(leaves)
    backward(root)
    analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}

    if numeric_fn is None:
        def numeric_fn(arrays):
            return loss_fn({k: Tensor(v) for k, v in arrays.items()}).item()

    work = {k: _as_matrix(v).copy() for k, v in params.items()}
    worst = 0.0
    for name, arr in work.items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = numeric_fn(work)
            arr[idx] = orig - eps
            down = numeric_fn(work)
            arr[idx] = orig
            num = (up - down) / (2.0 * eps)
            ana = analytic[name][idx]
            denom = max(abs(ana), abs(num), 1e-12)
            worst = max(worst, abs(ana - num) / denom)
    return worst
