"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity in the package (network outputs, MC sample
means, variance estimates, the transductive loss) lives as a :class:`Node`
on a :class:`Tape`. Nodes are appended in creation order, so replaying the
tape backwards is a valid reverse topological order.

Broadcasting is deliberately strict: elementwise ops accept equal shapes or
a scalar operand. Anything else goes through the explicit ``broadcast``
primitive so that gradient reduction is always visible in the graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class DomainError(ValueError):
    pass


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


class Node:
    """A value on the tape together with its producing operation."""

    __slots__ = ("id", "value", "grad", "op", "parents", "tape", "requires_grad", "_backward")

    def __init__(self, tape: "Tape", value: np.ndarray, op: str,
                 parents: Sequence["Node"] = (), backward: Callable | None = None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.value = value
        self.grad = None
        self.op = op
        self.parents = tuple(p.id for p in parents)
        self.requires_grad = op == "leaf" or any(p.requires_grad for p in parents)
        self._backward = backward
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    # Operator sugar. Plain numbers are lifted to scalar constants.
    def _lift(self, other):
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    def __radd__(self, other):
        return self.tape.add(self._lift(other), self)

    def __sub__(self, other):
        return self.tape.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.sub(self._lift(other), self)

    def __mul__(self, other):
        return self.tape.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.tape.mul(self._lift(other), self)

    def __neg__(self):
        return self.tape.mul(self, self.tape.const(-1.0))

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of scalar/explicit broadcast)."""
    if grad.shape == tuple(shape):
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and grad.shape[i + lead] != 1
    )
    return grad.sum(axis=axes).reshape(shape)


class Tape:
    """Append-only record of nodes in creation (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- leaves -----------------------------------------------------------
    def var(self, value) -> Node:
        return Node(self, _frozen(value), "leaf")

    def const(self, value) -> Node:
        return Node(self, _frozen(value), "const")

    def _make(self, op, value, parents, backward) -> Node:
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        return Node(self, value, op, parents, backward)

    # -- elementwise binary -----------------------------------------------
    @staticmethod
    def _check_elementwise(op, a: Node, b: Node):
        sa, sb = a.shape, b.shape
        if sa == sb or a.value.ndim == 0 or b.value.ndim == 0:
            return
        raise ShapeError(op, sa, sb)

    def add(self, a: Node, b: Node) -> Node:
        self._check_elementwise("add", a, b)
        sa, sb = a.shape, b.shape
        na, nb = a.requires_grad, b.requires_grad
        return self._make("add", a.value + b.value, (a, b),
                          lambda g: (_reduce_to(g, sa) if na else None,
                                     _reduce_to(g, sb) if nb else None))

    def sub(self, a: Node, b: Node) -> Node:
        self._check_elementwise("subtract", a, b)
        sa, sb = a.shape, b.shape
        na, nb = a.requires_grad, b.requires_grad
        return self._make("subtract", a.value - b.value, (a, b),
                          lambda g: (_reduce_to(g, sa) if na else None,
                                     -_reduce_to(g, sb) if nb else None))

    def mul(self, a: Node, b: Node) -> Node:
        self._check_elementwise("multiply", a, b)
        av, bv = a.value, b.value
        na, nb = a.requires_grad, b.requires_grad
        return self._make("multiply", av * bv, (a, b),
                          lambda g: (_reduce_to(g * bv, av.shape) if na else None,
                                     _reduce_to(g * av, bv.shape) if nb else None))

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", av.shape, bv.shape)
        na, nb = a.requires_grad, b.requires_grad
        return self._make("matmul", av @ bv, (a, b),
                          lambda g: (g @ bv.T if na else None, av.T @ g if nb else None))

    # -- elementwise unary --------------------------------------------------
    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self, a: Node) -> Node:
        out = expit(a.value)
        return self._make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))

    def log(self, a: Node) -> Node:
        x = a.value
        if np.any(x <= 0):
            raise DomainError("log: non-positive argument; clamp before taking logs")
        return self._make("log", np.log(x), (a,), lambda g: (g / x,))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._make("exp", out, (a,), lambda g: (g * out,))

    def square(self, a: Node) -> Node:
        x = a.value
        return self._make("square", x * x, (a,), lambda g: (2.0 * g * x,))

    def reciprocal(self, a: Node) -> Node:
        x = a.value
        if np.any(x == 0):
            raise DomainError("reciprocal: zero argument")
        out = 1.0 / x
        return self._make("reciprocal", out, (a,), lambda g: (-g * out * out,))

    def clip(self, a: Node, lo: float, hi: float) -> Node:
        x = a.value
        inside = (x >= lo) & (x <= hi)
        return self._make("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))

    # -- reductions and shape ops -------------------------------------------
    def sum(self, a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
        shape = a.shape
        out = a.value.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._make("sum", out, (a,), backward)

    def mean(self, a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
        shape = a.shape
        count = a.value.size if axis is None else shape[axis]
        out = a.value.mean(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape).copy(),)

        return self._make("mean", out, (a,), backward)

    def reshape(self, a: Node, shape) -> Node:
        old = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", old, tuple(shape)) from None
        return self._make("reshape", out, (a,), lambda g: (g.reshape(old),))

    def broadcast(self, a: Node, shape) -> Node:
        """Explicit broadcast (scalar or size-1 axes) to ``shape``."""
        shape = tuple(shape)
        old = a.shape
        try:
            out = np.broadcast_to(a.value, shape)
        except ValueError:
            raise ShapeError("broadcast", old, shape) from None
        return self._make("broadcast", out, (a,), lambda g: (_reduce_to(g, old),))


def backward(tape: Tape, root: Node) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(node) for every node on ``tape``.

    Returns a table keyed by node id. Nodes that do not feed ``root`` get a
    zero gradient, as do constants and anything computed from constants
    alone (they are not differentiated, like frozen tensors). Each node's
    ``grad`` attribute is filled in as well.
    """
    if root.value.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    for node in reversed(tape.nodes[: root.id + 1]):
        g = grads.get(node.id)
        if g is None or node._backward is None or not node.requires_grad:
            continue
        parent_grads = node._backward(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    for node in tape.nodes:
        if node.id not in grads:
            grads[node.id] = np.zeros_like(node.value)
        node.grad = grads[node.id]
    return grads


def finite_diff_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]] | Callable,
                      theta, step: float = 1e-6, grad=None, floor: float = 1e-12,
                      order: int = 2) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f`` maps a flat parameter vector to a scalar. The analytic gradient is
    either passed as ``grad`` or ``f`` returns ``(value, grad)``. Each error is
    ``|a - n| / max(|a|, |n|, floor)``; raise ``floor`` to the central-difference
    noise level when some true gradients are zero. ``order=4`` uses the
    five-point central stencil, which tolerates a larger step.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    theta = np.asarray(theta, dtype=np.float64).copy()
    if grad is None:
        _, grad = f(theta)

        def scalar(t):
            return f(t)[0]
    else:
        scalar = f
    grad = np.asarray(grad, dtype=np.float64).ravel()
    worst = 0.0
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e.flat[i] = step
        if order == 2:
            numeric = (float(scalar(theta + e)) - float(scalar(theta - e))) / (2 * step)
        else:
            numeric = (-float(scalar(theta + 2 * e)) + 8 * float(scalar(theta + e))
                       - 8 * float(scalar(theta - e)) + float(scalar(theta - 2 * e))) / (12 * step)
        err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), floor)
        worst = max(worst, err)
    return worst
