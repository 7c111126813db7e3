"""Reverse-mode automatic differentiation over small dense float64 arrays.

The engine is staged: a :class:`Graph` is an append-only list of primitive
instructions whose topological order equals append order.  Leaves are
``input`` / ``param`` / ``const`` nodes; everything else reads earlier
nodes.  Evaluation (:func:`forward`), differentiation (:func:`backward`)
and gradient-graph emission (:func:`make_gradient_graph`) all walk that
list in a fixed order, so results are bitwise reproducible.

The key capability beyond a plain tape is :func:`make_gradient_graph`: it
re-expresses the reverse sweep *as new graph nodes*, so the gradient of a
scalar output with respect to an input is itself a differentiable graph.
That is what lets a model use an energy gradient inside its vector field
and still receive exact parameter gradients of the training loss.

Both :func:`backward` and :func:`make_gradient_graph` run the same sweep
over the same per-primitive adjoint rules, once with a numeric algebra
and once with a node-emitting algebra.  Because numpy's elementary
float64 operations are deterministic, evaluating the emitted gradient
graph reproduces ``backward`` bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "NumericError",
    "forward",
    "backward",
    "make_gradient_graph",
    "finite_diff_gradient",
]


class GraphError(Exception):
    """Structural problem: bad shapes, unknown leaf, malformed graph."""


class NumericError(Exception):
    """A value became NaN/Inf during evaluation."""


_LEAF_OPS = frozenset({"input", "param", "const"})


@dataclass(frozen=True)
class Node:
    op: str
    args: tuple
    shape: tuple
    meta: object = None


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Graph:
    """Append-only instruction list over a closed primitive set.

    Node ids are list indices; operands always precede their consumers.
    Graphs are immutable once frozen and safe to share across threads;
    per-call state lives in the values list that :func:`forward` returns.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[str, int] = {}
        self._frozen = False
        self._plan = None

    # -- construction ---------------------------------------------------

    def _append(self, node: Node) -> int:
        if self._frozen:
            raise GraphError("graph is frozen; no further nodes may be added")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _leaf(self, op: str, name: str, shape) -> int:
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise GraphError(f"negative extent in shape {shape}")
        if name in self._leaves:
            nid = self._leaves[name]
            node = self.nodes[nid]
            if node.op != op or node.shape != shape:
                raise GraphError(
                    f"leaf {name!r} redeclared as {op}{shape}, was {node.op}{node.shape}")
            return nid
        nid = self._append(Node(op, (), shape, name))
        self._leaves[name] = nid
        return nid

    def input(self, name: str, shape) -> int:
        return self._leaf("input", name, shape)

    def param(self, name: str, shape) -> int:
        return self._leaf("param", name, shape)

    def const(self, value) -> int:
        arr = _as_f64(value)
        arr.setflags(write=False)
        return self._append(Node("const", (), arr.shape, arr))

    def leaf_id(self, name: str) -> int:
        try:
            return self._leaves[name]
        except KeyError:
            raise GraphError(f"no leaf named {name!r}") from None

    def leaves(self, kind: str | None = None) -> dict[str, int]:
        out = {}
        for name, nid in self._leaves.items():
            if kind is None or self.nodes[nid].op == kind:
                out[name] = nid
        return out

    def freeze(self) -> "Graph":
        self._frozen = True
        return self

    def _shape(self, nid: int) -> tuple:
        if not 0 <= nid < len(self.nodes):
            raise GraphError(f"node id {nid} out of range")
        return self.nodes[nid].shape

    # -- primitives -----------------------------------------------------

    def add(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa != sb:
            raise GraphError(f"add shape mismatch {sa} vs {sb}")
        return self._append(Node("add", (a, b), sa))

    def mul(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa == sb:
            shape = sa
        elif sa == ():
            shape = sb
        elif sb == ():
            shape = sa
        else:
            raise GraphError(f"mul shape mismatch {sa} vs {sb}")
        return self._append(Node("mul", (a, b), shape))

    def smul(self, a: int, s: float) -> int:
        return self._append(Node("smul", (a,), self._shape(a), float(s)))

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) not in (1, 2) or len(sb) not in (1, 2):
            raise GraphError(f"matmul needs 1-D or 2-D operands, got {sa} @ {sb}")
        if sa[-1] != sb[0]:
            raise GraphError(f"matmul inner dimension mismatch {sa} @ {sb}")
        if len(sa) == 2 and len(sb) == 2:
            shape = (sa[0], sb[1])
        elif len(sa) == 2:
            shape = (sa[0],)
        elif len(sb) == 2:
            shape = (sb[1],)
        else:
            shape = ()
        return self._append(Node("matmul", (a, b), shape))

    def _unary(self, op: str, a: int) -> int:
        return self._append(Node(op, (a,), self._shape(a)))

    def tanh(self, a: int) -> int:
        return self._unary("tanh", a)

    def relu(self, a: int) -> int:
        return self._unary("relu", a)

    def softplus(self, a: int) -> int:
        return self._unary("softplus", a)

    def sigmoid(self, a: int) -> int:
        return self._unary("sigmoid", a)

    def square(self, a: int) -> int:
        return self._unary("square", a)

    def step(self, a: int) -> int:
        return self._unary("step", a)

    def reciprocal(self, a: int) -> int:
        return self._unary("reciprocal", a)

    def sum(self, a: int) -> int:
        return self._append(Node("sum", (a,), ()))

    def slice(self, a: int, start: int, stop: int) -> int:
        sa = self._shape(a)
        if len(sa) != 1:
            raise GraphError(f"slice needs a 1-D operand, got {sa}")
        if not 0 <= start < stop <= sa[0]:
            raise GraphError(f"slice [{start}:{stop}] out of range for {sa}")
        return self._append(Node("slice", (a,), (stop - start,), (start, stop)))

    def concat(self, *parts: int) -> int:
        if not parts:
            raise GraphError("concat needs at least one operand")
        total = 0
        for p in parts:
            sp = self._shape(p)
            if len(sp) != 1:
                raise GraphError(f"concat needs 1-D operands, got {sp}")
            total += sp[0]
        return self._append(Node("concat", tuple(parts), (total,)))

    def transpose(self, a: int) -> int:
        sa = self._shape(a)
        if len(sa) != 2:
            raise GraphError(f"transpose needs a 2-D operand, got {sa}")
        return self._append(Node("transpose", (a,), (sa[1], sa[0])))

    def reshape(self, a: int, shape) -> int:
        sa = self._shape(a)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(sa, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
            raise GraphError(f"reshape {sa} -> {shape} changes element count")
        return self._append(Node("reshape", (a,), shape, sa))

    # -- sugar (expands to primitives) ------------------------------------

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.smul(b, -1.0))

    def dot(self, a: int, b: int) -> int:
        return self.sum(self.mul(a, b))

    def copy(self) -> "Graph":
        g = Graph()
        g.nodes = list(self.nodes)
        g._leaves = dict(self._leaves)
        return g


# -- evaluation ----------------------------------------------------------


def _sigmoid(x):
    # exp(-softplus(-x)); stable for large |x|
    return np.exp(-np.logaddexp(0.0, np.negative(x)))


def _kernel(node: Node):
    op, args, meta = node.op, node.args, node.meta
    if op == "add":
        a, b = args
        return lambda v: np.add(v[a], v[b])
    if op == "mul":
        a, b = args
        return lambda v: np.multiply(v[a], v[b])
    if op == "smul":
        (a,) = args
        s = meta
        return lambda v: np.multiply(v[a], s)
    if op == "matmul":
        a, b = args
        return lambda v: np.matmul(v[a], v[b])
    if op == "tanh":
        (a,) = args
        return lambda v: np.tanh(v[a])
    if op == "relu":
        (a,) = args
        return lambda v: np.maximum(v[a], 0.0)
    if op == "softplus":
        (a,) = args
        return lambda v: np.logaddexp(0.0, v[a])
    if op == "sigmoid":
        (a,) = args
        return lambda v: _sigmoid(v[a])
    if op == "square":
        (a,) = args
        return lambda v: np.square(v[a])
    if op == "step":
        (a,) = args
        return lambda v: np.greater(v[a], 0.0).astype(np.float64)
    if op == "reciprocal":
        (a,) = args
        return lambda v: np.divide(1.0, v[a])
    if op == "sum":
        (a,) = args
        return lambda v: np.sum(v[a])
    if op == "slice":
        (a,) = args
        start, stop = meta
        return lambda v: v[a][start:stop]
    if op == "concat":
        return lambda v, args=args: np.concatenate([v[p] for p in args])
    if op == "transpose":
        (a,) = args
        return lambda v: v[a].T
    if op == "reshape":
        (a,) = args
        shape = node.shape
        return lambda v: np.reshape(v[a], shape)
    raise GraphError(f"unknown primitive {op!r}")


def _plan(graph: Graph):
    if graph._plan is None:
        graph._plan = [(i, _kernel(n)) for i, n in enumerate(graph.nodes)
                       if n.op not in _LEAF_OPS]
    return graph._plan


def forward(graph: Graph, bindings: dict, check_finite: bool = True) -> list:
    """Evaluate every node; returns the list of values indexed by node id.

    ``bindings`` maps leaf names (inputs and params) to arrays.  Evaluation
    is deterministic: identical bindings give identical bits.
    """
    nodes = graph.nodes
    values: list = [None] * len(nodes)
    for name, nid in graph._leaves.items():
        node = nodes[nid]
        if name not in bindings:
            raise GraphError(f"unbound leaf {name!r}")
        arr = _as_f64(bindings[name])
        if arr.shape != node.shape:
            raise GraphError(
                f"leaf {name!r} bound with shape {arr.shape}, declared {node.shape}")
        values[nid] = arr
    for nid, node in enumerate(nodes):
        if node.op == "const":
            values[nid] = node.meta
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for nid, fn in _plan(graph):
            values[nid] = fn(values)
    if check_finite:
        for nid, val in enumerate(values):
            if not np.all(np.isfinite(val)):
                raise NumericError(
                    f"non-finite value at node {nid} ({nodes[nid].op})")
    return values


# -- adjoint sweep (shared by backward and make_gradient_graph) -----------


class _NumericAlgebra:
    """Adjoint arithmetic on concrete arrays."""

    def __init__(self, values):
        self._values = values

    def val(self, nid):
        return self._values[nid]

    @staticmethod
    def add(a, b):
        return np.add(a, b)

    @staticmethod
    def mul(a, b):
        return np.multiply(a, b)

    @staticmethod
    def smul(a, s):
        return np.multiply(a, s)

    @staticmethod
    def matmul(a, b):
        return np.matmul(a, b)

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def reshape(a, shape):
        return np.reshape(a, shape)

    @staticmethod
    def square(a):
        return np.square(a)

    @staticmethod
    def sigmoid(a):
        return _sigmoid(a)

    @staticmethod
    def step(a):
        return np.greater(a, 0.0).astype(np.float64)

    @staticmethod
    def slice(a, start, stop):
        return a[start:stop]

    @staticmethod
    def concat(parts):
        return np.concatenate(parts)

    @staticmethod
    def ones(shape):
        return np.ones(shape, dtype=np.float64)

    @staticmethod
    def zeros(shape):
        return np.zeros(shape, dtype=np.float64)

    @staticmethod
    def sum(a):
        return np.sum(a)


class _GraphAlgebra:
    """Adjoint arithmetic that appends nodes to a graph instead of computing."""

    def __init__(self, graph: Graph):
        self._graph = graph

    def val(self, nid):
        return nid

    def add(self, a, b):
        return self._graph.add(a, b)

    def mul(self, a, b):
        return self._graph.mul(a, b)

    def smul(self, a, s):
        return self._graph.smul(a, s)

    def matmul(self, a, b):
        return self._graph.matmul(a, b)

    def transpose(self, a):
        return self._graph.transpose(a)

    def reshape(self, a, shape):
        return self._graph.reshape(a, shape)

    def square(self, a):
        return self._graph.square(a)

    def sigmoid(self, a):
        return self._graph.sigmoid(a)

    def step(self, a):
        return self._graph.step(a)

    def slice(self, a, start, stop):
        return self._graph.slice(a, start, stop)

    def concat(self, parts):
        return self._graph.concat(*parts)

    def ones(self, shape):
        return self._graph.const(np.ones(shape, dtype=np.float64))

    def zeros(self, shape):
        return self._graph.const(np.zeros(shape, dtype=np.float64))

    def sum(self, a):
        return self._graph.sum(a)


def _one_minus(A, x, shape):
    return A.add(A.ones(shape), A.smul(x, -1.0))


def _matmul_adjoints(A, node, shapes, g):
    a, b = node.args
    sa, sb = shapes[0], shapes[1]
    va, vb = A.val(a), A.val(b)
    if len(sa) == 2 and len(sb) == 2:
        yield a, A.matmul(g, A.transpose(vb))
        yield b, A.matmul(A.transpose(va), g)
    elif len(sa) == 2 and len(sb) == 1:
        m, k = sa
        yield a, A.matmul(A.reshape(g, (m, 1)), A.reshape(vb, (1, k)))
        yield b, A.matmul(A.transpose(va), g)
    elif len(sa) == 1 and len(sb) == 2:
        k, n = sb
        yield a, A.matmul(vb, g)
        yield b, A.matmul(A.reshape(va, (k, 1)), A.reshape(g, (1, n)))
    else:
        yield a, A.mul(g, vb)
        yield b, A.mul(g, va)


def _local_adjoints(graph: Graph, nid: int, g, A):
    """Yield (operand id, contribution) pairs for one node's adjoint."""
    node = graph.nodes[nid]
    op = node.op
    shapes = tuple(graph.nodes[arg].shape for arg in node.args)
    if op == "add":
        a, b = node.args
        yield a, g
        yield b, g
    elif op == "mul":
        a, b = node.args
        ca = A.mul(g, A.val(b))
        cb = A.mul(g, A.val(a))
        # a scalar broadcast against b (or vice versa) needs a reduction
        if shapes[0] == () and shapes[1] != ():
            ca = A.sum(ca)
        if shapes[1] == () and shapes[0] != ():
            cb = A.sum(cb)
        yield a, ca
        yield b, cb
    elif op == "smul":
        yield node.args[0], A.smul(g, node.meta)
    elif op == "matmul":
        yield from _matmul_adjoints(A, node, shapes, g)
    elif op == "tanh":
        (a,) = node.args
        t = A.val(nid)
        yield a, A.mul(g, _one_minus(A, A.square(t), node.shape))
    elif op == "relu":
        (a,) = node.args
        yield a, A.mul(g, A.step(A.val(a)))
    elif op == "softplus":
        (a,) = node.args
        yield a, A.mul(g, A.sigmoid(A.val(a)))
    elif op == "sigmoid":
        (a,) = node.args
        s = A.val(nid)
        yield a, A.mul(A.mul(g, s), _one_minus(A, s, node.shape))
    elif op == "square":
        (a,) = node.args
        yield a, A.mul(g, A.smul(A.val(a), 2.0))
    elif op == "step":
        return  # derivative defined as zero everywhere (relu'' convention)
    elif op == "reciprocal":
        (a,) = node.args
        yield a, A.smul(A.mul(g, A.square(A.val(nid))), -1.0)
    elif op == "sum":
        (a,) = node.args
        yield a, A.mul(A.ones(shapes[0]), g)
    elif op == "slice":
        (a,) = node.args
        start, stop = node.meta
        n = shapes[0][0]
        parts = []
        if start > 0:
            parts.append(A.zeros((start,)))
        parts.append(g)
        if stop < n:
            parts.append(A.zeros((n - stop,)))
        yield a, (parts[0] if len(parts) == 1 else A.concat(parts))
    elif op == "concat":
        off = 0
        for p, sp in zip(node.args, shapes):
            yield p, A.slice(g, off, off + sp[0])
            off += sp[0]
    elif op == "transpose":
        yield node.args[0], A.transpose(g)
    elif op == "reshape":
        yield node.args[0], A.reshape(g, node.meta)
    else:
        raise GraphError(f"no derivative rule registered for primitive {op!r}")


# Ops with a registered derivative rule; anything else is rejected up front.
DIFFERENTIABLE_OPS = frozenset({
    "add", "mul", "smul", "matmul", "tanh", "relu", "softplus", "sigmoid",
    "square", "step", "reciprocal", "sum", "slice", "concat", "transpose",
    "reshape",
})


def _check_scalar_output(graph: Graph, out_id: int):
    shape = graph._shape(out_id)
    if shape != ():
        raise GraphError(f"output node {out_id} has shape {shape}, expected scalar")


def _sweep(graph: Graph, out_id: int, A) -> dict:
    """Reverse sweep in descending node order with fixed accumulation order."""
    acc = {out_id: A.ones(())}
    nodes = graph.nodes
    for nid in range(out_id, -1, -1):
        if nid not in acc or nodes[nid].op in _LEAF_OPS:
            continue
        if nodes[nid].op not in DIFFERENTIABLE_OPS:
            raise GraphError(
                f"no derivative rule registered for primitive {nodes[nid].op!r}")
        g = acc[nid]
        for operand, contrib in _local_adjoints(graph, nid, g, A):
            if operand in acc:
                acc[operand] = A.add(acc[operand], contrib)
            else:
                acc[operand] = contrib
    return acc


def backward(graph: Graph, out_id: int, bindings: dict, values: list | None = None,
             check_finite: bool = True) -> dict:
    """Gradient of a scalar output with respect to every input and param leaf.

    Runs one reverse sweep with fixed-order accumulation; leaves that do
    not influence the output get zero gradients.
    """
    _check_scalar_output(graph, out_id)
    if values is None:
        values = forward(graph, bindings, check_finite=check_finite)
    acc = _sweep(graph, out_id, _NumericAlgebra(values))
    grads = {}
    for name, nid in graph._leaves.items():
        node = graph.nodes[nid]
        if node.op == "const":
            continue
        if nid in acc:
            grads[name] = np.asarray(acc[nid], dtype=np.float64)
        else:
            grads[name] = np.zeros(node.shape, dtype=np.float64)
    return grads


def make_gradient_graph(graph: Graph, out_id: int, wrt: str):
    """Emit a new graph computing d(out)/d(input ``wrt``) as graph nodes.

    The returned graph contains the original nodes (same ids) followed by
    the adjoint computation; the second element is the node id holding the
    gradient.  All emitted nodes are themselves differentiable, so a later
    :func:`backward` on the new graph yields exact mixed second derivatives
    with respect to the params.
    """
    _check_scalar_output(graph, out_id)
    wrt_id = graph.leaf_id(wrt)
    if graph.nodes[wrt_id].op != "input":
        raise GraphError(f"gradient target {wrt!r} is not an input leaf")
    out = graph.copy()
    acc = _sweep(out, out_id, _GraphAlgebra(out))
    if wrt_id in acc:
        grad_id = acc[wrt_id]
    else:
        grad_id = out.const(np.zeros(graph.nodes[wrt_id].shape, dtype=np.float64))
    return out, grad_id


def finite_diff_gradient(f, x, h) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h.

    ``h`` may be a scalar or a per-coordinate array of positive steps.
    """
    x = np.asarray(x, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), x.shape).copy()
    if np.any(h <= 0.0):
        raise ValueError("finite difference step must be positive")
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_h = h.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        xp = flat_x.copy()
        xp[i] += flat_h[i]
        fp = float(f(xp.reshape(x.shape)))
        xm = flat_x.copy()
        xm[i] -= flat_h[i]
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        flat_g[i] = (fp - fm) / (2.0 * flat_h[i])
    return grad
