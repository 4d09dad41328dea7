"""
Tape-based reverse-mode differentiation.

A Graph is an append-only tape of Nodes. Every primitive applied to a tensor
that lives on a graph appends a Node holding its output value and a
vector-Jacobian product. The VJPs are themselves written with primitives, so
the cotangents produced by `gradient()` are ordinary graph tensors and can be
differentiated again (double backward).

Usage:
    graph = Graph()
    x = graph.variable(np.array([3.0]), name="x")
    (dx,) = gradient(x * x * x, [x])        # 3x^2, still on the graph
    (ddx,) = gradient(dx, [x])              # 6x
"""

import inspect
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from gradleak.errors import GraphError, NonFiniteError, UnboundInputError

# vjp(g, out, needs) -> one cotangent (or None) per parent
VJP = Callable[["Tensor", "Tensor", Tuple[bool, ...]], Sequence[Optional["Tensor"]]]


class Node:
    """One recorded primitive application."""

    __slots__ = ("index", "kind", "parents", "vjp", "value", "graph", "kink")

    def __init__(self, index: int, kind: str, parents: Tuple["Tensor", ...],
                 vjp: Optional[VJP], value: np.ndarray, graph: "Graph",
                 kink: Optional[float] = None):
        self.index = index
        self.kind = kind
        self.parents = parents
        self.vjp = vjp
        self.value = value
        self.graph = graph
        # distance of the input to the nearest non-differentiable point
        self.kink = kink


class Graph:
    """Append-only tape; node order is a topological order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.inputs: Dict[str, "Tensor"] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, parents: Tuple["Tensor", ...], vjp: Optional[VJP],
               value: np.ndarray, kink: Optional[float] = None) -> Node:
        node = Node(len(self.nodes), kind, parents, vjp, value, self, kink)
        self.nodes.append(node)
        return node

    def variable(self, data: Any, name: Optional[str] = None) -> "Tensor":
        """Register a differentiable leaf."""
        value = np.array(data, dtype=np.float64)
        _check_finite("variable", value)
        node = self.record("leaf", (), None, value)
        tensor = Tensor(value, node)
        if name is not None:
            self.inputs[name] = tensor
        return tensor

    def kink_margin(self) -> float:
        """Smallest recorded distance of any kinked primitive to its kink."""
        margins = [n.kink for n in self.nodes if n.kink is not None]
        return min(margins) if margins else float("inf")

    def reset(self) -> None:
        """Drop the whole trace; tensors from before the reset become stale."""
        self.nodes = []
        self.inputs = {}

    def owns(self, node: Optional[Node]) -> bool:
        return (node is not None and node.graph is self
                and node.index < len(self.nodes) and self.nodes[node.index] is node)


class Tensor:
    """
    n-dimensional float64 array with an optional handle into a Graph.

    Tensors without a node are constants: primitives accept them but never
    propagate cotangents into them.
    """

    __slots__ = ("data", "node")
    # make ndarray (op) Tensor dispatch to Tensor's reflected operators
    __array_priority__ = 1000

    def __init__(self, data: Any, node: Optional[Node] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def graph(self) -> Optional[Graph]:
        return self.node.graph if self.node is not None else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f"node={self.node.kind}#{self.node.index}" if self.node is not None else "const"
        return f"Tensor(shape={self.shape}, {tag})"

    def __len__(self) -> int:
        return self.shape[0]


def _check_finite(kind: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"primitive '{kind}' produced non-finite values")


def graph_of(tensors: Sequence[Tensor]) -> Optional[Graph]:
    """The single graph shared by the given tensors (None if all are constants)."""
    graph = None
    for t in tensors:
        if t.node is None:
            continue
        if not t.node.graph.owns(t.node):
            raise GraphError("tensor belongs to a graph that has been reset")
        if graph is None:
            graph = t.node.graph
        elif t.node.graph is not graph:
            raise GraphError("cannot combine tensors from different graphs")
    return graph


def make(kind: str, value: np.ndarray, parents: Sequence[Tensor], vjp: VJP,
         kink: Optional[float] = None) -> Tensor:
    """Wrap a primitive's output, recording it when any parent is on a graph."""
    value = np.asarray(value, dtype=np.float64)
    _check_finite(kind, value)
    graph = graph_of(parents)
    if graph is None:
        return Tensor(value)
    node = graph.record(kind, tuple(parents), vjp, value, kink)
    return Tensor(value, node)


def gradient(scalar: Tensor, wrt: Sequence[Tensor]) -> List[Tensor]:
    """
    Reverse-mode derivative of a 1-element tensor w.r.t. graph tensors.

    The returned cotangents are built from primitives and recorded on the same
    graph, so `gradient` may be applied to (functions of) them again.

    Raises:
        GraphError: if `scalar` has more than one element, or a `wrt` tensor is
            not a live node of the scalar's graph.
    """
    from gradleak.autodiff.primitives import add

    if scalar.data.size != 1:
        raise GraphError(f"gradient() needs a 1-element target, got shape {scalar.shape}")
    wrt = list(wrt)
    if not wrt:
        return []
    graph = scalar.graph if scalar.node is not None else graph_of(wrt)
    for w in wrt:
        if graph is None or not graph.owns(w.node):
            raise GraphError("wrt tensor does not participate in the target's graph")
    if scalar.node is None:
        # constant target: derivative is identically zero
        return [Tensor(np.zeros_like(w.data)) for w in wrt]
    if not graph.owns(scalar.node):
        raise GraphError("target belongs to a graph that has been reset")

    nodes = graph.nodes
    top = scalar.node.index
    wrt_index = {w.node.index for w in wrt}
    start = min(wrt_index)

    # forward reachability: nodes that depend on some wrt tensor
    relevant = np.zeros(top + 1, dtype=bool)
    for i in range(start, top + 1):
        if i in wrt_index:
            relevant[i] = True
            continue
        for p in nodes[i].parents:
            if p.node is not None and p.node.index >= start and relevant[p.node.index]:
                relevant[i] = True
                break
    if not relevant[top]:
        return [Tensor(np.zeros_like(w.data)) for w in wrt]

    cotangents: Dict[int, Tensor] = {top: Tensor(np.ones_like(scalar.data))}
    for i in range(top, start - 1, -1):
        g = cotangents.get(i)
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        if i not in wrt_index:
            del cotangents[i]
        needs = tuple(p.node is not None and p.node.graph is graph
                      and p.node.index >= start and bool(relevant[p.node.index])
                      for p in node.parents)
        if not any(needs):
            continue
        grads = node.vjp(g, Tensor(node.value, node), needs)
        for parent, need, pg in zip(node.parents, needs, grads):
            if not need or pg is None:
                continue
            j = parent.node.index
            if j in cotangents:
                cotangents[j] = add(cotangents[j], pg)
            else:
                cotangents[j] = pg

    results = []
    for w in wrt:
        g = cotangents.get(w.node.index)
        results.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return results


def evaluate(graph: Graph, fn: Callable[..., Tensor], bindings: Dict[str, Any]) -> Tensor:
    """
    Bind named inputs as graph variables and run `fn` on them.

    Every required parameter of `fn` must be bound; names `fn` does not accept
    are rejected unless it takes `**kwargs`.
    """
    params = inspect.signature(fn).parameters
    takes_kwargs = any(p.kind is p.VAR_KEYWORD for p in params.values())
    required = [name for name, p in params.items()
                if p.default is p.empty and p.kind in (p.POSITIONAL_OR_KEYWORD, p.KEYWORD_ONLY)]
    missing = [name for name in required if name not in bindings]
    if missing:
        raise UnboundInputError(f"unbound graph inputs: {', '.join(missing)}")
    if not takes_kwargs:
        unknown = [name for name in bindings if name not in params]
        if unknown:
            raise UnboundInputError(f"unknown graph inputs: {', '.join(unknown)}")
    leaves = {}
    for name, value in bindings.items():
        if isinstance(value, Tensor):
            value = value.data
        leaves[name] = graph.variable(value, name=name)
    return fn(**leaves)
