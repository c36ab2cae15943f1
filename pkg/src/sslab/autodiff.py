"""Dense float64 tensors with reverse-mode differentiation over a retained graph.

A :class:`Graph` records every operation applied through it (define-by-run).
The recording is a plain program: a topologically ordered list of nodes
with their op kind, input ids and static attributes. It can therefore be
re-evaluated with new input or parameter values (:func:`forward_eval`),
differentiated (:func:`backward`) and re-walked by the relevance
propagation code in :mod:`sslab.attribution`.

Tensors are ``numpy.ndarray`` objects of dtype float64. Integer token ids
never enter the graph as differentiable values; they are static attributes
of ``embed`` and ``pick`` nodes.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "Node",
    "Graph",
    "forward_eval",
    "backward",
    "grad_check",
]


class GraphError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(GraphError, ValueError):
    """Operand shapes are incompatible for the requested op."""

    def __init__(self, node_id: int, op: str, detail: str):
        self.node_id = node_id
        self.op = op
        super().__init__(f"node {node_id} ({op}): {detail}")


class NonFiniteError(GraphError, FloatingPointError):
    """An op produced NaN or infinite values."""

    def __init__(self, node_id: int, op: str):
        self.node_id = node_id
        self.op = op
        super().__init__(f"node {node_id} ({op}): non-finite output")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _matmul_vjp(g, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a.ndim == 1:
        g = np.expand_dims(g, -2)
    if b.ndim == 1:
        g = g[..., None]
    ga = np.matmul(g, np.swapaxes(b2, -1, -2))
    if b2.ndim == 2 and a2.ndim > 2:
        # (..., n, k) @ (k, m): fold the batch dims instead of broadcasting b
        k = a2.shape[-1]
        gb = a2.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.matmul(np.swapaxes(a2, -1, -2), g)
    ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
    gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
    return ga, gb


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(x, axis=-1):
    s = x - x.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def _slice_index(ndim, axis, start, stop):
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop)
    return tuple(idx)


def _ln_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * gamma + beta


def _ln_vjp(g, x, gamma, eps):
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gxhat = g * gamma
    gx = inv / d * (d * gxhat - gxhat.sum(-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(-1, keepdims=True))
    ggamma = _unbroadcast(g * xhat, gamma.shape)
    gbeta = _unbroadcast(g, gamma.shape)
    return gx, ggamma, gbeta


# op kind -> (forward(values, attrs), vjp(grad, values, out, attrs) -> input grads)
_Forward = Callable[[Sequence[np.ndarray], dict], np.ndarray]
_Vjp = Callable[[np.ndarray, Sequence[np.ndarray], np.ndarray, dict], Sequence[Optional[np.ndarray]]]

OPS: Dict[str, tuple] = {
    "matmul": (
        lambda v, a: np.matmul(v[0], v[1]),
        lambda g, v, y, a: _matmul_vjp(g, v[0], v[1]),
    ),
    # matmul whose left operand (attention weights) is a constant for relevance
    "attend": (
        lambda v, a: np.matmul(v[0], v[1]),
        lambda g, v, y, a: _matmul_vjp(g, v[0], v[1]),
    ),
    "add": (
        lambda v, a: v[0] + v[1],
        lambda g, v, y, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    ),
    "sub": (
        lambda v, a: v[0] - v[1],
        lambda g, v, y, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
    ),
    "mul": (
        lambda v, a: v[0] * v[1],
        lambda g, v, y, a: (_unbroadcast(g * v[1], v[0].shape),
                            _unbroadcast(g * v[0], v[1].shape)),
    ),
    # elementwise product where operand 0 is a gate and operand 1 the signal
    "gate": (
        lambda v, a: v[0] * v[1],
        lambda g, v, y, a: (_unbroadcast(g * v[1], v[0].shape),
                            _unbroadcast(g * v[0], v[1].shape)),
    ),
    "scale": (
        lambda v, a: v[0] * a["c"],
        lambda g, v, y, a: (g * a["c"],),
    ),
    "tanh": (
        lambda v, a: np.tanh(v[0]),
        lambda g, v, y, a: (g * (1.0 - y * y),),
    ),
    "sigmoid": (
        lambda v, a: _sigmoid(v[0]),
        lambda g, v, y, a: (g * y * (1.0 - y),),
    ),
    "relu": (
        lambda v, a: np.maximum(v[0], 0.0),
        lambda g, v, y, a: (g * (v[0] > 0),),
    ),
    "softmax": (
        lambda v, a: _softmax(v[0], a["axis"]),
        lambda g, v, y, a: (y * (g - (g * y).sum(axis=a["axis"], keepdims=True)),),
    ),
    "log_softmax": (
        lambda v, a: _log_softmax(v[0], a["axis"]),
        lambda g, v, y, a: (g - np.exp(y) * g.sum(axis=a["axis"], keepdims=True),),
    ),
    "embed": (
        lambda v, a: v[0][a["ids"]],
        None,  # handled in backward: scatter-add into the table
    ),
    "concat": (
        lambda v, a: np.concatenate(v, axis=a["axis"]),
        lambda g, v, y, a: np.split(g, np.cumsum([x.shape[a["axis"]] for x in v])[:-1], axis=a["axis"]),
    ),
    "slice": (
        lambda v, a: v[0][_slice_index(v[0].ndim, a["axis"], a["start"], a["stop"])],
        None,  # handled in backward
    ),
    "sum": (
        lambda v, a: v[0].sum(axis=a["axis"], keepdims=a["keepdims"]),
        None,  # handled in backward
    ),
    "reshape": (
        lambda v, a: v[0].reshape(a["shape"]),
        lambda g, v, y, a: (g.reshape(v[0].shape),),
    ),
    "transpose": (
        lambda v, a: np.transpose(v[0], a["axes"]),
        lambda g, v, y, a: (np.transpose(g, np.argsort(a["axes"])),),
    ),
    "pick": (
        lambda v, a: np.take_along_axis(v[0], a["ids"][..., None], axis=-1)[..., 0],
        None,  # handled in backward
    ),
    "layer_norm": (
        lambda v, a: _ln_forward(v[0], v[1], v[2], a["eps"]),
        lambda g, v, y, a: _ln_vjp(g, v[0], v[1], a["eps"]),
    ),
}

_LEAVES = ("input", "param", "const")


def _special_vjp(node, g, vals):
    op, a = node.op, node.attrs
    x = vals[0]
    if op == "embed":
        gt = np.zeros_like(x)
        np.add.at(gt, a["ids"], g)
        return (gt,)
    if op == "slice":
        gx = np.zeros_like(x)
        gx[_slice_index(x.ndim, a["axis"], a["start"], a["stop"])] = g
        return (gx,)
    if op == "sum":
        axis = a["axis"]
        if axis is not None and not a["keepdims"]:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    if op == "pick":
        gx = np.zeros_like(x)
        np.put_along_axis(gx, a["ids"][..., None], g[..., None], axis=-1)
        return (gx,)
    raise GraphError(f"no gradient rule for op {op!r}")


class Node:
    """Handle to one recorded value in a :class:`Graph`."""

    __slots__ = ("graph", "id", "op", "inputs", "attrs", "value")

    def __init__(self, graph, id, op, inputs, attrs, value):
        self.graph = graph
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.scale(self, -1.0)


Operand = Union[Node, np.ndarray, float]


class Graph:
    """Recorder and container for one computation.

    Parameters
    ----------
    params : mapping of name -> ndarray
        Parameter registry. Arrays are referenced, not copied, so updates
        made by an optimizer are visible to :func:`forward_eval` replays.
    record : bool
        When False, ops are evaluated eagerly without being stored. Used
        for inference, where no gradient or relevance is ever requested.
    """

    def __init__(self, params: Optional[Mapping[str, np.ndarray]] = None, record: bool = True):
        self.params = params if params is not None else {}
        self.record = record
        self.nodes: list = []
        self.inputs: Dict[str, int] = {}
        self.outputs: Dict[str, int] = {}
        self._param_nodes: Dict[str, Node] = {}
        self._cleared = False

    # -- construction -------------------------------------------------

    def _push(self, op: str, inputs: Sequence[Node], value: np.ndarray, attrs: Optional[dict] = None) -> Node:
        node_id = len(self.nodes) if self.record else -1
        if not np.isfinite(value).all():
            raise NonFiniteError(node_id, op)
        node = Node(self, node_id, op, tuple(n.id for n in inputs), attrs or {}, value)
        if self.record:
            self.nodes.append(node)
        return node

    def _apply(self, op: str, inputs: Sequence[Operand], **attrs) -> Node:
        nodes = [self._lift(x) for x in inputs]
        fwd = OPS[op][0]
        try:
            value = fwd([n.value for n in nodes], attrs)
        except (ValueError, IndexError) as exc:
            raise ShapeError(len(self.nodes) if self.record else -1, op, str(exc)) from None
        return self._push(op, nodes, np.asarray(value, dtype=np.float64), attrs)

    def _lift(self, x: Operand) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise GraphError("operand belongs to a different graph")
            return x
        return self.const(x)

    def input(self, name: str, value) -> Node:
        """Bind a named input (re-bindable in :func:`forward_eval`)."""
        if name in self.inputs:
            raise GraphError(f"input {name!r} already defined")
        node = self._push("input", (), np.array(value, dtype=np.float64), {"name": name})
        if self.record:
            self.inputs[name] = node.id
        return node

    def const(self, value) -> Node:
        value = np.array(value, dtype=np.float64)
        return self._push("const", (), value, {"value": value})

    def param(self, name: str) -> Node:
        """Node for a registered parameter; one node per name per graph."""
        node = self._param_nodes.get(name)
        if node is None:
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            node = self._push("param", (), self.params[name], {"name": name})
            self._param_nodes[name] = node
        return node

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node.id
        return node

    def matmul(self, a, b):
        return self._apply("matmul", (a, b))

    def attend(self, weights, values):
        """``weights @ values`` with the weights treated as constants by LRP."""
        return self._apply("attend", (weights, values))

    def add(self, a, b):
        return self._apply("add", (a, b))

    def sub(self, a, b):
        return self._apply("sub", (a, b))

    def mul(self, a, b):
        return self._apply("mul", (a, b))

    def gate(self, gate, signal):
        """Elementwise ``gate * signal``; relevance flows through ``signal``."""
        return self._apply("gate", (gate, signal))

    def scale(self, x, c: float):
        return self._apply("scale", (x,), c=float(c))

    def tanh(self, x):
        return self._apply("tanh", (x,))

    def sigmoid(self, x):
        return self._apply("sigmoid", (x,))

    def relu(self, x):
        return self._apply("relu", (x,))

    def softmax(self, x, axis: int = -1):
        return self._apply("softmax", (x,), axis=axis)

    def log_softmax(self, x, axis: int = -1):
        return self._apply("log_softmax", (x,), axis=axis)

    def embed(self, table, ids, role: Optional[str] = None, pos: Optional[int] = None):
        """Row lookup ``table[ids]``. ``ids`` are constants, never differentiated.

        ``role`` and ``pos`` tag the lookup for relevance bookkeeping: the
        token position is ``pos`` when given, else the last axis of ``ids``.
        """
        ids = np.asarray(ids, dtype=np.int64)
        table = self._lift(table)
        if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
            raise ShapeError(len(self.nodes) if self.record else -1, "embed",
                             f"index out of range for table with {table.value.shape[0]} rows")
        return self._apply("embed", (table,), ids=ids, role=role, pos=pos)

    def concat(self, xs: Iterable, axis: int = -1):
        return self._apply("concat", tuple(xs), axis=axis)

    def slice(self, x, start: int, stop: int, axis: int = -1):
        return self._apply("slice", (x,), start=start, stop=stop, axis=axis)

    def sum(self, x, axis: Optional[int] = None, keepdims: bool = False):
        return self._apply("sum", (x,), axis=axis, keepdims=keepdims)

    def reshape(self, x, shape):
        return self._apply("reshape", (x,), shape=tuple(shape))

    def transpose(self, x, axes):
        return self._apply("transpose", (x,), axes=tuple(axes))

    def pick(self, x, ids):
        """Select ``x[..., ids]`` along the last axis, one index per row."""
        return self._apply("pick", (x,), ids=np.asarray(ids, dtype=np.int64))

    def layer_norm(self, x, gamma, beta, eps: float = 1e-5):
        return self._apply("layer_norm", (x, gamma, beta), eps=eps)

    # -- bookkeeping ----------------------------------------------------

    def clear(self) -> None:
        """Drop cached values; the program itself is kept."""
        for node in self.nodes:
            if node.op not in _LEAVES:
                node.value = None
        self._cleared = True

    def __len__(self):
        return len(self.nodes)


def _resolve(graph: Graph, ref) -> Node:
    if isinstance(ref, Node):
        return ref
    if isinstance(ref, str):
        if ref in graph.outputs:
            return graph.nodes[graph.outputs[ref]]
        raise GraphError(f"unknown output {ref!r}")
    return graph.nodes[int(ref)]


def forward_eval(graph: Graph, inputs: Optional[Mapping[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """Re-evaluate every recorded node, caching outputs.

    ``inputs`` rebinds named inputs; unnamed ones keep their recorded
    values. Parameters are re-read from the registry. Returns the named
    outputs (or ``{"out": value}`` of the last node when none are named).
    """
    inputs = dict(inputs or {})
    unknown = set(inputs) - set(graph.inputs)
    if unknown:
        raise GraphError(f"unknown inputs: {sorted(unknown)}")
    for node in graph.nodes:
        if node.op == "input":
            name = node.attrs["name"]
            if name in inputs:
                value = np.asarray(inputs[name], dtype=np.float64)
                if value.shape != node.value.shape:
                    raise ShapeError(node.id, "input", f"expected shape {node.value.shape}, got {value.shape}")
                node.value = value
        elif node.op == "param":
            node.value = graph.params[node.attrs["name"]]
        elif node.op == "const":
            node.value = node.attrs["value"]
        else:
            vals = [graph.nodes[i].value for i in node.inputs]
            try:
                value = OPS[node.op][0](vals, node.attrs)
            except (ValueError, IndexError) as exc:
                raise ShapeError(node.id, node.op, str(exc)) from None
            if not np.isfinite(value).all():
                raise NonFiniteError(node.id, node.op)
            node.value = value
    graph._cleared = False
    if graph.outputs:
        return {name: graph.nodes[i].value for name, i in graph.outputs.items()}
    return {"out": graph.nodes[-1].value} if graph.nodes else {}


def backward(graph: Graph, seed, return_nodes: bool = False):
    """Gradients of the scalar ``seed`` with respect to every parameter.

    Returns a dict ``name -> ndarray`` with one entry per registered
    parameter; parameters the seed does not depend on get zeros. With
    ``return_nodes=True`` a second dict ``node id -> gradient`` is also
    returned (useful for gradients with respect to inputs).
    """
    if graph._cleared or not graph.nodes:
        raise GraphError("backward called before forward evaluation")
    root = _resolve(graph, seed)
    if root.value is None:
        raise GraphError("backward called before forward evaluation")
    if root.value.size != 1:
        raise GraphError(f"seed node {root.id} is not scalar (shape {root.value.shape})")

    grads: Dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
    nodes = graph.nodes
    for node in reversed(nodes[: root.id + 1]):
        g = grads.get(node.id)
        if g is None or node.op in _LEAVES:
            continue
        vals = [nodes[i].value for i in node.inputs]
        vjp = OPS[node.op][1]
        in_grads = vjp(g, vals, node.value, node.attrs) if vjp else _special_vjp(node, g, vals)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or nodes[i].op == "const":
                continue
            prev = grads.get(i)
            grads[i] = gi if prev is None else prev + gi

    out = {name: np.zeros_like(value) for name, value in graph.params.items()}
    for name, pnode in graph._param_nodes.items():
        if pnode.id in grads:
            out[name] = grads[pnode.id] + 0.0
    if return_nodes:
        return out, grads
    return out


def grad_check(graph: Graph, seed, eps: float = 1e-5, names: Optional[Iterable[str]] = None,
               max_per_param: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               per: str = "tensor") -> float:
    """Max relative error between analytic and central-difference gradients.

    With ``per="tensor"`` (default) each parameter tensor contributes
    ``max|a - n| / max(max|a|, max|n|, 1e-8)`` over its probed elements;
    ``per="element"`` applies the same formula to every element on its own.
    The element form is dominated by finite-difference round-off (about
    1e-11 for O(1) losses) wherever a gradient entry is below ~1e-7, which
    real networks always have somewhere.

    Each probe perturbs one parameter element in the registry and replays the
    graph with :func:`forward_eval`. ``max_per_param`` restricts the probe
    to a random subset of elements of each parameter.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    if per not in ("tensor", "element"):
        raise ValueError("per must be 'tensor' or 'element'")
    root = _resolve(graph, seed)
    forward_eval(graph)
    analytic = backward(graph, root)
    names = list(graph.params) if names is None else list(names)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    try:
        for name in names:
            theta = graph.params[name]
            flat = theta.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = rng.choice(flat.size, max_per_param, replace=False)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                forward_eval(graph)
                f_plus = float(root.value.reshape(-1)[0])
                flat[i] = orig - eps
                forward_eval(graph)
                f_minus = float(root.value.reshape(-1)[0])
                flat[i] = orig
                num[j] = (f_plus - f_minus) / (2.0 * eps)
            if not len(idx):
                continue
            ana = analytic[name].reshape(-1)[idx]
            diff = np.abs(ana - num)
            if per == "element":
                err = (diff / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)).max()
            else:
                err = diff.max() / max(np.abs(ana).max(), np.abs(num).max(), 1e-8)
            worst = max(worst, float(err))
    finally:
        forward_eval(graph)
    return worst
