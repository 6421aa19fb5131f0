"""Reverse-mode differentiation over dense float64 arrays.

Every primitive registers its adjoint in terms of other primitives, so the
gradient of a scalar is itself a graph that can be differentiated again.
That is what Hessian-vector products and their parameter gradients need.

Example
-------
>>> x = variable([3.0, 4.0])
>>> (g,) = gradient(scale(squared_norm(x), 0.5), [x])
>>> g.value
array([3., 4.])
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Node",
    "Graph",
    "ElementwiseFn",
    "EXP",
    "LOG",
    "constant",
    "variable",
    "detach",
    "no_grad",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum_to",
    "broadcast_to",
    "total",
    "elementwise",
    "concat",
    "take",
    "pad",
    "affine",
    "dot",
    "squared_norm",
    "build_primitive",
    "gradient",
    "hvp",
]


class AutodiffError(RuntimeError):
    """Contract violation inside the differentiation engine."""


class ShapeError(AutodiffError, ValueError):
    """Parent shapes do not conform to a primitive's shape rule."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        listed = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible operand shapes {listed}")


_ids = itertools.count()
_grad_enabled = True
_active_graphs: list["Graph"] = []


class Node:
    """One value in a computation graph.

    A node is a constant when ``requires_grad`` is false; constants keep no
    parents so they never extend the graph.
    """

    __slots__ = ("id", "op", "parents", "value", "requires_grad", "_vjp", "name")

    def __init__(self, value, op="const", parents=(), vjp=None, requires_grad=False, name=None):
        self.id = next(_ids)
        self.op = op
        self.value = value
        self.requires_grad = requires_grad
        self.parents = tuple(parents) if requires_grad else ()
        self._vjp = vjp if requires_grad else None
        self.name = name
        for g in _active_graphs:
            g._record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Node<{self.op}{tag} shape={self.shape} grad={self.requires_grad}>"

    # Operator sugar keeps model code readable.
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self):
        return transpose(self)


class Graph:
    """Append-only record of the nodes created while it is active.

    Graphs are optional: nodes link to their parents directly, so
    differentiation never needs one. A graph is useful to inspect what a
    model evaluation built.

    >>> with Graph() as g:
    ...     y = squared_norm(variable([1.0, 2.0]))
    >>> [n.op for n in g.nodes]
    ['leaf', 'mul', 'sum_to']
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    def _record(self, node: Node) -> None:
        self.nodes.append(node)
        if node.is_leaf:
            self.leaves.append(node)

    def __enter__(self):
        _active_graphs.append(self)
        return self

    def __exit__(self, *exc):
        _active_graphs.remove(self)
        return False


@contextmanager
def no_grad():
    """Evaluate primitives as constants (no graph is built)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def constant(value, name=None) -> Node:
    return Node(_as_array(value), op="const", name=name)


def variable(value, name=None) -> Node:
    """A leaf that gradients flow into (an input or a parameter)."""
    return Node(np.array(value, dtype=np.float64), op="leaf", requires_grad=True, name=name)


def detach(node: Node) -> Node:
    """Same value, cut from the graph."""
    return Node(node.value, op="detach")


def _make(op: str, value: np.ndarray, parents: Sequence[Node], vjp) -> Node:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    return Node(value, op=op, parents=parents, vjp=vjp, requires_grad=track)


# ---------------------------------------------------------------------------
# primitives


def add(a: Node, b: Node) -> Node:
    try:
        out = a.value + b.value
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make("add", out, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a: Node, b: Node) -> Node:
    try:
        out = a.value - b.value
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make("sub", out, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product with numpy broadcasting."""
    try:
        out = a.value * b.value
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make("mul", out, (a, b), lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _make("scale", a.value * c, (a,), lambda g: (scale(g, c),))


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def matmul(a: Node, b: Node) -> Node:
    """Product of two 2-D arrays."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(
        "matmul",
        a.value @ b.value,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", a.value.T, (a,), lambda g: (transpose(g),))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _make("reshape", out, (a,), lambda g: (reshape(g, src),))


def _sum_axes(src: tuple[int, ...], dst: tuple[int, ...]) -> tuple[int, ...]:
    lead = len(src) - len(dst)
    if lead < 0:
        raise ShapeError("sum_to", src, dst)
    axes = list(range(lead))
    for i, n in enumerate(dst):
        if src[lead + i] != n:
            if n != 1:
                raise ShapeError("sum_to", src, dst)
            axes.append(lead + i)
    return tuple(axes)


def sum_to(a: Node, shape: Sequence[int]) -> Node:
    """Sum ``a`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    src = a.shape
    if src == shape:
        return a
    axes = _sum_axes(src, shape)
    out = a.value.sum(axis=axes).reshape(shape)
    return _make("sum_to", out, (a,), lambda g: (broadcast_to(g, src),))


def broadcast_to(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(shape)
    src = a.shape
    if src == shape:
        return a
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError("broadcast_to", src, shape) from None
    return _make("broadcast_to", out, (a,), lambda g: (sum_to(g, src),))


def total(a: Node) -> Node:
    """Sum of all entries, a scalar node."""
    return sum_to(a, ())


class ElementwiseFn(Protocol):
    """A smooth scalar function with derivatives of every order."""

    name: str

    def derivative(self, x: np.ndarray, order: int) -> np.ndarray: ...


def elementwise(a: Node, fn: ElementwiseFn, order: int = 0) -> Node:
    """Apply the ``order``-th derivative of ``fn`` entrywise."""
    return _make(
        f"{fn.name}^({order})",
        fn.derivative(a.value, order),
        (a,),
        lambda g: (mul(g, elementwise(a, fn, order + 1)),),
    )


class _Exp:
    name = "exp"

    def derivative(self, x, order):
        return np.exp(x)


class _Log:
    name = "log"

    def derivative(self, x, order):
        if order == 0:
            return np.log(x)
        k = order
        sign = -1.0 if k % 2 == 0 else 1.0
        return sign * float(np.prod(np.arange(1, k))) / x**k


EXP = _Exp()
LOG = _Log()


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat", *(n.shape for n in nodes)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g):
        return tuple(take(g, ax, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make("concat", out, nodes, vjp)


def take(a: Node, axis: int, start: int, stop: int) -> Node:
    """Contiguous slice ``start:stop`` along ``axis``."""
    ax = axis % a.value.ndim
    n = a.shape[ax]
    if not 0 <= start <= stop <= n:
        raise ShapeError("take", a.shape, (start, stop))
    idx = [slice(None)] * a.value.ndim
    idx[ax] = slice(start, stop)
    return _make("take", a.value[tuple(idx)], (a,), lambda g: (pad(g, ax, start, n),))


def pad(a: Node, axis: int, start: int, length: int) -> Node:
    """Embed ``a`` at offset ``start`` in zeros of extent ``length`` along ``axis``."""
    ax = axis % a.value.ndim
    m = a.shape[ax]
    if start < 0 or start + m > length:
        raise ShapeError("pad", a.shape, (start, length))
    shape = list(a.shape)
    shape[ax] = length
    out = np.zeros(shape)
    idx = [slice(None)] * a.value.ndim
    idx[ax] = slice(start, start + m)
    out[tuple(idx)] = a.value
    return _make("pad", out, (a,), lambda g: (take(g, ax, start, start + m),))


# ---------------------------------------------------------------------------
# composites


def affine(W: Node, b: Node | None, x: Node) -> Node:
    """``x @ W.T + b``; ``x`` is one vector or a batch of row vectors."""
    if x.value.ndim == 1:
        if W.value.ndim != 2 or W.shape[1] != x.shape[0]:
            raise ShapeError("affine", W.shape, x.shape)
        out = reshape(matmul(reshape(x, (1, -1)), transpose(W)), (W.shape[0],))
    else:
        if W.value.ndim != 2 or x.value.ndim != 2 or W.shape[1] != x.shape[1]:
            raise ShapeError("affine", W.shape, x.shape)
        out = matmul(x, transpose(W))
    if b is not None:
        if b.shape != (W.shape[0],):
            raise ShapeError("affine", W.shape, b.shape)
        out = add(out, b)
    return out


def dot(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return total(mul(a, b))


def squared_norm(a: Node) -> Node:
    return total(mul(a, a))


_PRIMITIVES: dict[str, Callable] = {
    "affine": affine,
    "add": add,
    "scale": scale,
    "concat": lambda *ps, axis=-1: concat(ps, axis=axis),
    "sum-reduce": total,
    "squared-norm": squared_norm,
    "dot": dot,
    "mul": mul,
    "matmul": matmul,
}


def build_primitive(op: str, parents: Sequence[Node], **kwargs) -> Node:
    """Dispatch by op tag; ``elementwise-activation`` takes ``fn=`` and ``order=``."""
    if op == "elementwise-activation":
        (a,) = parents
        return elementwise(a, kwargs["fn"], kwargs.get("order", 0))
    try:
        f = _PRIMITIVES[op]
    except KeyError:
        raise AutodiffError(f"unknown primitive {op!r}") from None
    return f(*parents, **kwargs)


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Node, stop: frozenset = frozenset()) -> list[Node]:
    order: list[Node] = []
    seen = {root.id}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        for p in it:
            if p.requires_grad and p.id not in seen:
                seen.add(p.id)
                stack.append((p, iter(() if p.id in stop else p.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def gradient(scalar: Node, wrt: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Gradients of ``scalar`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned nodes are differentiable; otherwise
    they are constants. Nodes ``scalar`` does not depend on get zeros.
    """
    if scalar.value.shape != ():
        raise AutodiffError(f"gradient needs a scalar, got shape {scalar.shape}")
    wrt = list(wrt)
    zeros = [constant(np.zeros(w.shape)) for w in wrt]
    if not scalar.requires_grad:
        return zeros

    targets = {w.id for w in wrt}
    # with one target nothing above it can lie on a path from it
    order = _topo_order(scalar, frozenset(targets) if len(targets) == 1 else frozenset())
    # keep only nodes that lie on a path from some target to the scalar
    live: set[int] = set()
    for n in order:
        if n.id in targets or any(p.id in live for p in n.parents):
            live.add(n.id)
    if scalar.id not in live:
        return zeros

    grads: dict[int, Node] = {scalar.id: constant(1.0)}
    with _grad_mode(create_graph):
        for n in reversed(order):
            g = grads.get(n.id)
            if g is None or not n.parents:
                continue
            if not any(p.id in live for p in n.parents):
                continue
            for p, gp in zip(n.parents, n._vjp(g)):
                if p.id not in live:
                    continue
                prev = grads.get(p.id)
                grads[p.id] = gp if prev is None else add(prev, gp)
    out = []
    for w, z in zip(wrt, zeros):
        g = grads.get(w.id)
        if g is None:
            out.append(z)
        elif create_graph:
            out.append(g)
        else:
            out.append(detach(g))
    return out


def hvp(scalar: Node, x: Node, v, create_graph: bool = False) -> Node:
    """Hessian of ``scalar`` w.r.t. ``x`` applied to ``v``, by double backward."""
    (g,) = gradient(scalar, [x], create_graph=True)
    v = v if isinstance(v, Node) else constant(v)
    (hv,) = gradient(dot(g, v), [x], create_graph=create_graph)
    return hv
