"""Scalar reverse-mode automatic differentiation on an explicit recording.

Every operation appends a node to a ``DiffGraph``; a node stores its value,
its parent nodes and the local partial derivatives with respect to them.
``backward`` runs reverse accumulation over the recording. Because the
tangent arithmetic used by ``jacobian`` is itself recorded through the same
primitives, Jacobian entries are live nodes: any scalar assembled from them
(for example a contrast penalty) supports a further ``backward`` pass with
respect to inputs and parameters.

A graph and its nodes are confined to one logical thread at a time.
Independent computations should use independent graphs; a graph may be
handed to another thread when no operation on it is in flight.

All values are 64-bit floats. Non-finite values are rejected at recording
time so NaN/Inf never propagate silently through a graph.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffGraph",
    "DiffNode",
    "Dual",
    "GraphMismatchError",
    "JacobianMatrix",
    "add",
    "backward",
    "cos",
    "div",
    "exp",
    "finite_difference_jacobian",
    "jacobian",
    "leaky_relu",
    "log",
    "mul",
    "neg",
    "record",
    "sin",
    "sqrt",
    "sub",
]

_graph_ids = itertools.count()


class GraphMismatchError(ValueError):
    """Operands or query nodes belong to different graphs."""


class DiffNode:
    """One recorded scalar. Created through a graph, never directly."""

    __slots__ = ("graph", "index", "value", "parents", "partials", "op")

    def __init__(self, graph, index, value, parents, partials, op):
        self.graph = graph
        self.index = index
        self.value = value
        self.parents = parents
        self.partials = partials
        self.op = op

    def __repr__(self):
        return f"DiffNode({self.op}, value={self.value!r}, index={self.index})"

    # Arithmetic delegates to the module-level primitives so the same
    # expression code runs on nodes, duals and plain floats.
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

    def __pow__(self, exponent):
        return powi(self, exponent)


class DiffGraph:
    """Append-only recording of scalar operations in topological order."""

    __slots__ = ("graph_id", "nodes")

    def __init__(self):
        self.graph_id = next(_graph_ids)
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def record(self, op, operands, value, partials):
        """Append a node computing ``value`` from ``operands``.

        ``partials`` are the local derivatives of the result with respect to
        each operand, in order. Rejects non-finite values, mismatched
        operand/partial counts and operands from another graph.
        """
        if len(operands) != len(partials):
            raise ValueError(
                f"{op}: {len(operands)} operands but {len(partials)} partials"
            )
        for parent in operands:
            if parent.graph is not self:
                raise GraphMismatchError(
                    f"{op}: operand recorded on a different graph"
                )
        if not math.isfinite(value):
            raise ValueError(f"{op}: non-finite value {value!r}")
        for d in partials:
            if not math.isfinite(d):
                raise ValueError(f"{op}: non-finite partial {d!r}")
        node = DiffNode(
            self, len(self.nodes), float(value), tuple(operands),
            tuple(float(d) for d in partials), op,
        )
        self.nodes.append(node)
        return node

    def constant(self, value):
        """A leaf node with no parents."""
        return self.record("const", [], value, [])

    # Inputs and constants are the same kind of leaf; the distinction is
    # only which nodes a caller later passes to ``backward``.
    variable = constant

    def constants(self, values):
        return [self.constant(v) for v in values]


def record(op, operands, value, partials):
    """Module-level recording; the graph is taken from the first operand."""
    if not operands:
        raise ValueError("record without operands; use DiffGraph.constant")
    return operands[0].graph.record(op, operands, value, partials)


def backward(output, wrt):
    """Derivatives of ``output`` with respect to each node in ``wrt``.

    Reverse accumulation over the recording: each node at or below the
    output is visited exactly once, in reverse topological order, so the
    result is deterministic for a fixed graph. Nodes the output does not
    depend on get gradient 0.
    """
    graph = output.graph
    for w in wrt:
        if w.graph is not graph:
            raise GraphMismatchError("wrt node recorded on a different graph")
    adjoint = [0.0] * (output.index + 1)
    adjoint[output.index] = 1.0
    nodes = graph.nodes
    for i in range(output.index, -1, -1):
        a = adjoint[i]
        if a == 0.0:
            continue
        node = nodes[i]
        for parent, d in zip(node.parents, node.partials):
            adjoint[parent.index] += a * d
    return [adjoint[w.index] if w.index <= output.index else 0.0 for w in wrt]


class Dual:
    """A node paired with its recorded tangent. ``dot=None`` means a
    structural zero tangent (saves recording chains of zeros)."""

    __slots__ = ("value", "dot")

    def __init__(self, value, dot=None):
        self.value = value
        self.dot = dot

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

    def __pow__(self, exponent):
        return powi(self, exponent)


def _graph_of(*args):
    for a in args:
        if isinstance(a, DiffNode):
            return a.graph
        if isinstance(a, Dual):
            return a.value.graph
    return None


def _as_node(x, graph):
    if isinstance(x, DiffNode):
        return x
    return graph.constant(float(x))


def _as_dual(x, graph):
    if isinstance(x, Dual):
        return x
    return Dual(_as_node(x, graph), None)


def _dot_add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        g = _graph_of(a, b)
        a, b = _as_dual(a, g), _as_dual(b, g)
        return Dual(add(a.value, b.value), _dot_add(a.dot, b.dot))
    g = _graph_of(a, b)
    if g is None:
        return a + b
    a, b = _as_node(a, g), _as_node(b, g)
    return g.record("add", [a, b], a.value + b.value, [1.0, 1.0])


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        g = _graph_of(a, b)
        a, b = _as_dual(a, g), _as_dual(b, g)
        dot = a.dot if b.dot is None else (
            neg(b.dot) if a.dot is None else sub(a.dot, b.dot))
        return Dual(sub(a.value, b.value), dot)
    g = _graph_of(a, b)
    if g is None:
        return a - b
    a, b = _as_node(a, g), _as_node(b, g)
    return g.record("sub", [a, b], a.value - b.value, [1.0, -1.0])


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        g = _graph_of(a, b)
        a, b = _as_dual(a, g), _as_dual(b, g)
        dot = _dot_add(
            None if a.dot is None else mul(a.dot, b.value),
            None if b.dot is None else mul(a.value, b.dot),
        )
        return Dual(mul(a.value, b.value), dot)
    g = _graph_of(a, b)
    if g is None:
        return a * b
    a, b = _as_node(a, g), _as_node(b, g)
    return g.record("mul", [a, b], a.value * b.value, [b.value, a.value])


def div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        g = _graph_of(a, b)
        a, b = _as_dual(a, g), _as_dual(b, g)
        q = div(a.value, b.value)
        dot = _dot_add(
            None if a.dot is None else div(a.dot, b.value),
            None if b.dot is None else neg(div(mul(q, b.dot), b.value)),
        )
        return Dual(q, dot)
    g = _graph_of(a, b)
    if g is None:
        return a / b
    a, b = _as_node(a, g), _as_node(b, g)
    v = a.value / b.value
    return g.record("div", [a, b], v, [1.0 / b.value, -v / b.value])


def neg(a):
    if isinstance(a, Dual):
        return Dual(neg(a.value), None if a.dot is None else neg(a.dot))
    if isinstance(a, DiffNode):
        return a.graph.record("neg", [a], -a.value, [-1.0])
    return -a


def powi(a, n):
    """Integer power, recorded as repeated structure via x^n partials."""
    if not isinstance(n, int):
        raise TypeError("only integer exponents are supported")
    if isinstance(a, Dual):
        v = powi(a.value, n)
        if a.dot is None or n == 0:
            return Dual(v, None)
        return Dual(v, mul(mul(float(n), powi(a.value, n - 1)), a.dot))
    if isinstance(a, DiffNode):
        if n == 0:
            return a.graph.constant(1.0)
        return a.graph.record(
            f"pow{n}", [a], a.value ** n, [n * a.value ** (n - 1)])
    return a ** n


def exp(a):
    if isinstance(a, Dual):
        v = exp(a.value)
        return Dual(v, None if a.dot is None else mul(v, a.dot))
    if isinstance(a, DiffNode):
        v = math.exp(a.value)
        return a.graph.record("exp", [a], v, [v])
    return math.exp(a)


def log(a):
    if isinstance(a, Dual):
        return Dual(log(a.value),
                    None if a.dot is None else div(a.dot, a.value))
    if isinstance(a, DiffNode):
        return a.graph.record("log", [a], math.log(a.value), [1.0 / a.value])
    return math.log(a)


def sin(a):
    if isinstance(a, Dual):
        return Dual(sin(a.value),
                    None if a.dot is None else mul(cos(a.value), a.dot))
    if isinstance(a, DiffNode):
        return a.graph.record("sin", [a], math.sin(a.value), [math.cos(a.value)])
    return math.sin(a)


def cos(a):
    if isinstance(a, Dual):
        return Dual(cos(a.value),
                    None if a.dot is None else neg(mul(sin(a.value), a.dot)))
    if isinstance(a, DiffNode):
        return a.graph.record("cos", [a], math.cos(a.value), [-math.sin(a.value)])
    return math.cos(a)


def sqrt(a):
    """Square root. Undefined derivative at 0 is rejected; callers that
    need the norm-at-zero subgradient handle the zero case themselves."""
    if isinstance(a, Dual):
        v = sqrt(a.value)
        return Dual(v, None if a.dot is None else div(a.dot, mul(2.0, v)))
    if isinstance(a, DiffNode):
        if a.value <= 0.0:
            raise ValueError(f"sqrt: derivative undefined at {a.value!r}")
        v = math.sqrt(a.value)
        return a.graph.record("sqrt", [a], v, [0.5 / v])
    return math.sqrt(a)


def _leaky_slope(x, slope):
    """Derivative of leaky_relu as a recorded, piecewise-constant factor.

    Its own derivative is 0 away from the kink; at the kink we keep the
    negative-slope branch, a fixed measure-zero convention.
    """
    s = 1.0 if x.value > 0.0 else slope
    return x.graph.record("leaky_slope", [x], s, [0.0])


def leaky_relu(a, slope=0.2):
    """x for x > 0, slope*x otherwise; slope branch at exactly 0."""
    if isinstance(a, Dual):
        v = leaky_relu(a.value, slope)
        if a.dot is None:
            return Dual(v, None)
        return Dual(v, mul(_leaky_slope(a.value, slope), a.dot))
    if isinstance(a, DiffNode):
        s = 1.0 if a.value > 0.0 else slope
        return a.graph.record("leaky_relu", [a], s * a.value, [s])
    return a if a > 0.0 else slope * a


class JacobianMatrix:
    """Grid of Jacobian entries, each a live node on the recording graph.

    Column block ``k`` of width ``slot_dim`` holds the derivatives with
    respect to that slot of the input.
    """

    __slots__ = ("entries", "n_outputs", "n_inputs")

    def __init__(self, entries):
        self.entries = tuple(tuple(row) for row in entries)
        self.n_outputs = len(self.entries)
        self.n_inputs = len(self.entries[0]) if self.entries else 0

    def values(self):
        """Entry values as a float64 array of shape (n_outputs, n_inputs)."""
        return np.array(
            [[e.value for e in row] for row in self.entries], dtype=np.float64
        )

    def slot_block(self, k, slot_dim):
        """Node rows restricted to input columns [k*slot_dim, (k+1)*slot_dim)."""
        lo, hi = k * slot_dim, (k + 1) * slot_dim
        if hi > self.n_inputs:
            raise IndexError(f"slot {k} of width {slot_dim} out of range")
        return tuple(row[lo:hi] for row in self.entries)


def jacobian(fn, inputs):
    """Jacobian of ``fn`` at ``inputs`` with differentiable entries.

    ``fn`` maps a list of scalars (nodes, duals or floats, combined with
    this module's primitives) to a sequence of scalars. The function is
    re-recorded once per input coordinate with a unit tangent on that
    coordinate; entry values and tangents land on the live graph, so
    scalars built from the entries can be differentiated further.
    """
    if not inputs:
        raise ValueError("jacobian needs at least one input node")
    graph = inputs[0].graph
    for x in inputs:
        if x.graph is not graph:
            raise GraphMismatchError("inputs recorded on different graphs")
    columns = []
    n_out = None
    for i in range(len(inputs)):
        one = graph.constant(1.0)
        duals = [Dual(x, one if j == i else None)
                 for j, x in enumerate(inputs)]
        outputs = fn(duals)
        col = []
        for out in outputs:
            if isinstance(out, Dual):
                if not math.isfinite(out.value.value):
                    raise ValueError("jacobian: non-finite function output")
                col.append(out.dot if out.dot is not None
                           else graph.constant(0.0))
            elif isinstance(out, DiffNode):
                col.append(graph.constant(0.0))
            else:
                if not math.isfinite(out):
                    raise ValueError("jacobian: non-finite function output")
                col.append(graph.constant(0.0))
        if n_out is None:
            n_out = len(col)
        elif len(col) != n_out:
            raise ValueError("jacobian: output length changed between passes")
        columns.append(col)
    rows = [[columns[j][i] for j in range(len(inputs))] for i in range(n_out)]
    return JacobianMatrix(rows)


def finite_difference_jacobian(fn, x, step=1e-5):
    """Central-difference Jacobian of a plain vector function.

    The independent oracle for derivative checks: it never touches the
    recording machinery. ``fn`` maps a list of floats to a sequence of
    floats.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    x = [float(v) for v in x]
    cols = []
    for i in range(len(x)):
        xp = list(x)
        xm = list(x)
        xp[i] += step
        xm[i] -= step
        fp = np.asarray(fn(xp), dtype=np.float64)
        fm = np.asarray(fn(xm), dtype=np.float64)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError("non-finite function output at perturbed point")
        cols.append((fp - fm) / (2.0 * step))
    return np.stack(cols, axis=1)
