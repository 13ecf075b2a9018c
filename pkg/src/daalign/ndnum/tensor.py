"""Dense float64 tensors with a small reverse-mode gradient engine.

Every operation takes explicit shapes: there is no implicit broadcasting.
Bias-style additions are written as ``ones @ bias`` so that every shape
relationship in a model is visible at the call site.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "SortPermutation",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "parameter",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "softmax",
    "log",
    "square",
    "sum",
    "mean",
    "reshape",
    "concat",
    "gather",
    "sort_with_permutation",
    "grad_reverse",
    "forward_op",
    "backward",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them for backward."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar; all of these route through the functional ops below
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __radd__(self, other):
        return add(_as_tensor(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass(frozen=True)
class SortPermutation:
    """Source indices along the last axis: ``out[..., i] == inp[..., perm[..., i]]``."""

    perm: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return np.take_along_axis(values, self.perm, axis=-1)

    def inverse(self) -> np.ndarray:
        return np.argsort(self.perm, axis=-1, kind="stable")

    def is_bijection(self) -> bool:
        n = self.perm.shape[-1]
        ref = np.arange(n)
        return bool(np.all(np.sort(self.perm, axis=-1) == ref))


def _check_finite(arr: np.ndarray, kind: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    return arr


def _make(data: np.ndarray, kind: str, parents: tuple[Tensor, ...], back) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(np.asarray(data, dtype=np.float64), kind)
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._op = kind
        out._parents = parents
        out._backward = back
    else:
        out._op = "leaf"
        out._parents = ()
        out._backward = None
    return out


def _require_same(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _require_nonempty(a: Tensor, kind: str) -> None:
    if a.data.size == 0:
        raise ShapeError(f"{kind}: empty tensor")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: zero denominator")
    ad, bd = a.data, b.data
    return _make(ad / bd, "div", (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D ``(m,k)@(k,n)`` or batched 3-D ``(B,m,k)@(B,k,n)``; batch sizes must agree."""
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {ad.shape} @ {bd.shape}")

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, "matmul", (a, b), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError("transpose: needs rank >= 2")
    return _make(np.swapaxes(a.data, -1, -2), "transpose", (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _require_nonempty(a, "softmax")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (a,), back)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: non-positive input")
    ad = a.data
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), "sum", (a,),
                     lambda g: (np.full(shape, float(g)),))
    ax = axis % a.data.ndim
    return _make(a.data.sum(axis=ax), "sum", (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    _require_nonempty(a, "mean")
    shape = a.shape
    if axis is None:
        n = a.data.size
        return _make(np.asarray(a.data.mean()), "mean", (a,),
                     lambda g: (np.full(shape, float(g) / n),))
    ax = axis % a.data.ndim
    n = shape[ax]
    return _make(a.data.mean(axis=ax), "mean", (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape) / n,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {tuple(shape)}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError("concat: incompatible shapes "
                             f"{[t.shape for t in tensors]} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors,
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def gather(a: Tensor, index, axis: int = 0) -> Tensor:
    """``np.take(a, index, axis)``; repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=np.int64)
    ax = axis % a.data.ndim
    n = a.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather: index out of range for axis of size {n}")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (out,)

    return _make(np.take(a.data, idx, axis=ax), "gather", (a,), back)


def sort_with_permutation(a: Tensor) -> tuple[Tensor, SortPermutation]:
    """Ascending stable sort along the last axis (ties keep original order)."""
    _require_nonempty(a, "sort_with_permutation")
    perm = np.argsort(a.data, axis=-1, kind="stable")
    vals = np.take_along_axis(a.data, perm, axis=-1)

    def back(g):
        out = np.zeros_like(g)
        np.put_along_axis(out, perm, g, axis=-1)
        return (out,)

    return _make(vals, "sort", (a,), back), SortPermutation(perm)


def grad_reverse(a: Tensor, factor: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-factor``."""
    c = -float(factor)
    return _make(a.data.copy(), "grad_reverse", (a,), lambda g: (g * c,))


_FORWARD = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar-mul": scale,
    "matmul": matmul,
    "transpose": transpose,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "square": square,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "gather": gather,
    "sort_with_permutation": sort_with_permutation,
    "grad_reverse": grad_reverse,
}


def forward_op(kind: str, *inputs, **kwargs):
    """Dispatch an operation by its catalog name."""
    try:
        fn = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


@dataclass
class Graph:
    """Topologically ordered record of the operations reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                st = state.get(id(node))
                if st == 2:
                    continue
                if st == 1:
                    raise RuntimeError("cycle detected in computation graph")
                state[id(node)] = 1
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                pst = state.get(id(parent))
                if pst == 1:
                    raise RuntimeError("cycle detected in computation graph")
                if pst is None and parent.requires_grad:
                    stack.append((parent, 0))
            else:
                state[id(node)] = 2
                order.append(node)
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        return cls(nodes=order, leaves=leaves)


def backward(root: Tensor, graph: Graph | None = None, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar root.

    Returns a map from every reachable leaf with ``requires_grad`` to its
    gradient. With ``accumulate`` the gradients are also added into
    ``leaf.grad``.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if graph is None:
        graph = Graph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    result: dict[Tensor, np.ndarray] = {}
    for leaf in graph.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        result[leaf] = g
        if accumulate:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return result


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
