"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

The graph is rebuilt on every evaluation. Each :class:`Node` records its
parents together with a vector-Jacobian closure per parent; :func:`backward`
walks the graph in reverse topological order.

This engine is the reference path for the denoiser loss. The training loop
runs the fused kernels in :mod:`nsync._kernels`, which are checked against
this module and against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from nsync.errors import NumericalError

VJP = Callable[[np.ndarray], np.ndarray]


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "parents", "vjps", "name")
    # make numpy operators defer to the Node methods
    __array_ufunc__ = None

    def __init__(self, value, parents: Sequence["Node"] = (), vjps: Sequence[VJP] = (), name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)


def leaf(value, name: str | None = None) -> Node:
    return Node(value, name=name)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.shape),
            lambda g: _unbroadcast(g * a.value, b.shape),
        ),
    )


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    return Node(a.value @ b.value, (a, b), (lambda g: g @ b.value.T, lambda g: a.value.T @ g))


def square(a) -> Node:
    a = _as_node(a)
    return Node(a.value * a.value, (a,), (lambda g: 2.0 * a.value * g,))


def silu(a) -> Node:
    a = _as_node(a)
    sig = 1.0 / (1.0 + np.exp(-a.value))
    return Node(a.value * sig, (a,), (lambda g: g * sig * (1.0 + a.value * (1.0 - sig)),))


def tanh(a) -> Node:
    a = _as_node(a)
    y = np.tanh(a.value)
    return Node(y, (a,), (lambda g: g * (1.0 - y * y),))


def total(a) -> Node:
    a = _as_node(a)
    return Node(a.value.sum(), (a,), (lambda g: np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Node:
    a = _as_node(a)
    n = a.value.size
    return Node(a.value.mean(), (a,), (lambda g: np.full(a.shape, g / n),))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def make_vjp(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return Node(value, nodes, [make_vjp(i) for i in range(len(nodes))])


def take_rows(table, ids) -> Node:
    """Gather ``table[ids]``; the adjoint scatter-adds into the table."""
    table = _as_node(table)
    ids = np.asarray(ids, dtype=np.intp)

    def vjp(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids, g)
        return out

    return Node(table.value[ids], (table,), (vjp,))


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad_nodes(loss: Node, wrt: Iterable[Node]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each node in ``wrt``."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
    return [grads.get(id(n), np.zeros(n.shape)) for n in wrt]


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class GradVector:
    """Flat gradient over the trainable parameters, with its layout."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = sum(e.size for e in self.layout)
        if self.values.shape != (expected,):
            raise ValueError(f"gradient length {self.values.shape} does not match layout size {expected}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def unflatten(self) -> dict[str, np.ndarray]:
        return {e.name: self.values[e.offset : e.offset + e.size].reshape(e.shape).copy() for e in self.layout}

    def check_layout(self, other: "GradVector") -> None:
        if self.layout != other.layout:
            raise ValueError("gradient layouts differ")

    def replace(self, values: np.ndarray) -> "GradVector":
        return GradVector(values, self.layout)


def make_layout(shapes: Mapping[str, tuple[int, ...]], names: Sequence[str]) -> tuple[LayoutEntry, ...]:
    entries = []
    offset = 0
    for name in names:
        shape = tuple(int(s) for s in shapes[name])
        entry = LayoutEntry(name, shape, offset)
        entries.append(entry)
        offset += entry.size
    return tuple(entries)


def flatten(arrays: Mapping[str, np.ndarray], layout: Sequence[LayoutEntry]) -> GradVector:
    parts = []
    for e in layout:
        a = np.asarray(arrays[e.name], dtype=np.float64)
        if a.shape != e.shape:
            raise ValueError(f"{e.name}: shape {a.shape} does not match layout {e.shape}")
        parts.append(a.ravel())
    values = np.concatenate(parts) if parts else np.zeros(0)
    return GradVector(values, tuple(layout))


@dataclass
class ParamSet:
    """Named float64 arrays plus the ordered subset that receives gradients."""

    params: dict[str, np.ndarray]
    trainable: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in self.params.items()}
        missing = [n for n in self.trainable if n not in self.params]
        if missing:
            raise KeyError(f"trainable names not in the parameter set: {missing}")
        if len(set(self.trainable)) != len(self.trainable):
            raise ValueError("duplicate trainable names")
        self.trainable = tuple(self.trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.params.items()}, self.trainable)

    def with_trainable(self, names: Sequence[str]) -> "ParamSet":
        return ParamSet(self.params, tuple(names))

    @property
    def layout(self) -> tuple[LayoutEntry, ...]:
        return make_layout({k: v.shape for k, v in self.params.items()}, self.trainable)

    def flat(self) -> GradVector:
        """The trainable values flattened in layout order."""
        return flatten(self.params, self.layout)

    def updated(self, flat: GradVector) -> "ParamSet":
        if flat.layout != self.layout:
            raise ValueError("layout mismatch")
        # frozen arrays are shared, not copied
        params = dict(self.params)
        params.update(flat.unflatten())
        return ParamSet(params, self.trainable)


def backward(loss: Node, leaves: Mapping[str, Node], params: ParamSet) -> GradVector:
    """Gradient of ``loss`` for every trainable parameter of ``params``.

    ``leaves`` maps parameter names to the graph leaves that were built from
    them. Frozen parameters are never differentiated.
    """
    layout = params.layout
    for e in layout:
        if e.name not in leaves:
            raise KeyError(f"trainable parameter {e.name!r} does not appear in the graph")
    grads = grad_nodes(loss, [leaves[e.name] for e in layout])
    for e, g in zip(layout, grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {e.name!r}")
    return flatten({e.name: g for e, g in zip(layout, grads)}, layout)


def finite_difference_grad(
    f: Callable[[ParamSet], float], params: ParamSet, h: float = 1e-5
) -> GradVector:
    """Central differences over every trainable coordinate."""
    if not h > 0:
        raise ValueError("step size h must be positive")
    base = params.flat()
    out = np.empty_like(base.values)
    for i in range(len(base)):
        plus = base.values.copy()
        plus[i] += h
        minus = base.values.copy()
        minus[i] -= h
        fp = float(f(params.updated(base.replace(plus))))
        fm = float(f(params.updated(base.replace(minus))))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"objective is non-finite near coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return base.replace(out)
