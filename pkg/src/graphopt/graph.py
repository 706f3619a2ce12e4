"""Computation-graph data model: op nodes, tensor edges, validation,
topological ordering, node featurization, and the on-disk JSON format."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Fixed op vocabulary; "other" is the overflow bucket for unknown ops.
OP_TYPES = (
    "matmul",
    "conv",
    "elementwise-add",
    "elementwise-mul",
    "reduce",
    "sigmoid",
    "relu",
    "softmax",
    "concat",
    "split",
    "embed-lookup",
    "other",
)
OP_INDEX = {name: i for i, name in enumerate(OP_TYPES)}

BYTES_PER_ELEMENT = 4

_NODE_KEYS = {"id", "op", "shape", "flops", "out_bytes", "colocate"}
_EDGE_KEYS = {"src", "dst", "bytes"}
_TOP_KEYS = {"name", "nodes", "edges"}


class GraphError(ValueError):
    """A graph file or structure violates a model invariant."""


@dataclass(frozen=True)
class OpNode:
    id: int
    op_type: str
    output_shape: tuple[int, ...] = ()
    flops: float = 0.0
    output_bytes: float = 0.0
    colocation_group: str | None = None

    def __post_init__(self):
        if self.op_type not in OP_INDEX:
            raise GraphError(f"node {self.id}: unknown op_type {self.op_type!r}")
        if self.flops < 0 or self.output_bytes < 0:
            raise GraphError(f"node {self.id}: negative cost")
        if any(d <= 0 for d in self.output_shape):
            raise GraphError(f"node {self.id}: non-positive shape dim")
        if self.output_shape:
            expect = BYTES_PER_ELEMENT * math.prod(self.output_shape)
            if self.output_bytes != expect:
                raise GraphError(
                    f"node {self.id}: output_bytes {self.output_bytes} inconsistent "
                    f"with shape {list(self.output_shape)} ({expect} expected)"
                )


@dataclass(frozen=True)
class TensorEdge:
    src: int
    dst: int
    bytes: float

    def __post_init__(self):
        if self.bytes < 0:
            raise GraphError(f"edge {self.src}->{self.dst}: negative bytes")


class ComputationGraph:
    """Immutable DAG of ops. Node ids are dense integers 0..N-1."""

    def __init__(self, nodes: list[OpNode], edges: list[TensorEdge], name: str = ""):
        self.nodes = list(nodes)
        self.edges = list(edges)
        self.name = name
        self._validate()
        n = len(self.nodes)
        self._in_edges: list[list[TensorEdge]] = [[] for _ in range(n)]
        self._out_edges: list[list[TensorEdge]] = [[] for _ in range(n)]
        for e in self.edges:
            self._out_edges[e.src].append(e)
            self._in_edges[e.dst].append(e)
        self._topo = _topo_order(n, self.edges)
        if self._topo is None:
            stuck = sorted(set(range(n)) - set(_partial_topo(n, self.edges)))
            raise GraphError(f"graph {name!r}: cycle detected involving nodes {stuck[:6]}")

    def _validate(self):
        ids = [nd.id for nd in self.nodes]
        if sorted(ids) != list(range(len(ids))):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            if dup:
                raise GraphError(f"duplicate id {dup[0]}")
            raise GraphError(f"node ids not dense 0..{len(ids) - 1}: {sorted(ids)[:5]}")
        if ids != sorted(ids):
            raise GraphError("nodes must be listed in id order")
        n = len(self.nodes)
        for e in self.edges:
            if not (0 <= e.src < n) or not (0 <= e.dst < n):
                raise GraphError(f"dangling edge {e.src}->{e.dst} (N={n})")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def in_edges(self, v: int) -> list[TensorEdge]:
        return self._in_edges[v]

    def out_edges(self, v: int) -> list[TensorEdge]:
        return self._out_edges[v]

    def predecessors(self, v: int) -> list[int]:
        return [e.src for e in self._in_edges[v]]

    def successors(self, v: int) -> list[int]:
        return [e.dst for e in self._out_edges[v]]

    def neighbors(self, v: int) -> list[int]:
        """Undirected neighborhood (in-neighbors union out-neighbors), sorted."""
        return sorted({e.src for e in self._in_edges[v]} | {e.dst for e in self._out_edges[v]})

    def topo_order(self) -> list[int]:
        """Topological order with ties broken by ascending node id."""
        return list(self._topo)

    def to_dict(self) -> dict:
        nodes = []
        for nd in self.nodes:
            item = {
                "id": nd.id,
                "op": nd.op_type,
                "shape": list(nd.output_shape),
                "flops": nd.flops,
                "out_bytes": nd.output_bytes,
            }
            if nd.colocation_group is not None:
                item["colocate"] = nd.colocation_group
            nodes.append(item)
        edges = [{"src": e.src, "dst": e.dst, "bytes": e.bytes} for e in self.edges]
        return {"name": self.name, "nodes": nodes, "edges": edges}

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path: str | Path):
        Path(path).write_text(self.serialize())

    def __eq__(self, other):
        return (
            isinstance(other, ComputationGraph)
            and self.name == other.name
            and self.nodes == other.nodes
            and self.edges == other.edges
        )

    def __repr__(self):
        return f"ComputationGraph({self.name!r}, N={self.num_nodes}, E={self.num_edges})"


def _partial_topo(n: int, edges: list[TensorEdge]) -> list[int]:
    """Kahn's algorithm with a min-heap; stops early on a cycle, returning
    only the orderable prefix."""
    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for e in edges:
        if e.src == e.dst:
            indeg[e.dst] += 1
            continue
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)
    heap = [v for v in range(n) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    return order


def _topo_order(n: int, edges: list[TensorEdge]) -> list[int] | None:
    """The unique topological order that breaks ties by ascending node id,
    or None if a cycle exists."""
    order = _partial_topo(n, edges)
    return order if len(order) == n else None


def topo_order(graph: ComputationGraph) -> list[int]:
    return graph.topo_order()


def from_dict(data: dict, name: str | None = None) -> ComputationGraph:
    """Build a validated graph from the JSON object form. Unknown keys are
    rejected; edge bytes default to the source node's output bytes."""
    if not isinstance(data, dict):
        raise GraphError("graph file must contain a JSON object")
    extra = set(data) - _TOP_KEYS
    if extra:
        raise GraphError(f"unknown top-level keys: {sorted(extra)}")
    nodes = []
    for item in data.get("nodes", []):
        extra = set(item) - _NODE_KEYS
        if extra:
            raise GraphError(f"node entry: unknown keys {sorted(extra)}")
        if "id" not in item or "op" not in item:
            raise GraphError("node entry missing 'id' or 'op'")
        op = item["op"] if item["op"] in OP_INDEX else "other"
        nodes.append(
            OpNode(
                id=int(item["id"]),
                op_type=op,
                output_shape=tuple(int(d) for d in item.get("shape", [])),
                flops=float(item.get("flops", 0.0)),
                output_bytes=float(item.get("out_bytes", 0.0)),
                colocation_group=item.get("colocate"),
            )
        )
    by_id = {nd.id: nd for nd in nodes}
    edges = []
    for item in data.get("edges", []):
        extra = set(item) - _EDGE_KEYS
        if extra:
            raise GraphError(f"edge entry: unknown keys {sorted(extra)}")
        src, dst = int(item["src"]), int(item["dst"])
        if src not in by_id or dst not in by_id:
            raise GraphError(f"dangling edge {src}->{dst}")
        b = item.get("bytes")
        edges.append(TensorEdge(src, dst, float(b) if b is not None else by_id[src].output_bytes))
    return ComputationGraph(nodes, edges, name=data.get("name", name or ""))


def loads(text: str, name: str | None = None) -> ComputationGraph:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"parse error: {exc}") from exc
    return from_dict(data, name=name)


def load_graph(path: str | Path) -> ComputationGraph:
    """Load and validate a graph file; any invariant violation raises GraphError."""
    path = Path(path)
    return loads(path.read_text(), name=path.stem)


def feature_dim(action_space: int | list[int] | tuple[int, ...]) -> int:
    """Width of the node feature vector for the given action-space size(s)."""
    sizes = [action_space] if isinstance(action_space, int) else list(action_space)
    return len(OP_TYPES) + 4 + sum(sizes)


def node_features(
    graph: ComputationGraph,
    prev_actions=None,
    action_space: int | list[int] | tuple[int, ...] = 1,
) -> np.ndarray:
    """N x F feature matrix, rows ordered by topo_order.

    Each row is concat(one-hot op type, log1p(flops), log1p(output bytes),
    in-degree, out-degree, one-hot previous-iteration action per task).
    `prev_actions` may be None (zero action block), a single per-node integer
    vector (or anything with an `.actions` attribute), or a list of those for
    multiple tasks matching `action_space`.
    """
    sizes = [action_space] if isinstance(action_space, int) else list(action_space)
    if prev_actions is None:
        prev_list = [None] * len(sizes)
    elif isinstance(prev_actions, (list, tuple)) and not isinstance(prev_actions, np.ndarray):
        prev_list = list(prev_actions)
    else:
        prev_list = [prev_actions]
    if len(prev_list) != len(sizes):
        raise ValueError(f"{len(prev_list)} action vectors for {len(sizes)} action spaces")

    n = graph.num_nodes
    order = graph.topo_order()
    n_ops = len(OP_TYPES)
    feats = np.zeros((n, feature_dim(sizes)), dtype=np.float64)
    for row, v in enumerate(order):
        nd = graph.nodes[v]
        feats[row, OP_INDEX[nd.op_type]] = 1.0
        feats[row, n_ops] = math.log1p(nd.flops)
        feats[row, n_ops + 1] = math.log1p(nd.output_bytes)
        feats[row, n_ops + 2] = len(graph.in_edges(v))
        feats[row, n_ops + 3] = len(graph.out_edges(v))
    col = n_ops + 4
    for acts, a in zip(prev_list, sizes):
        if acts is not None:
            vec = np.asarray(getattr(acts, "actions", acts), dtype=np.int64)
            if vec.shape != (n,):
                raise ValueError(f"prev_actions has shape {vec.shape}, want ({n},)")
            if vec.min() < 0 or vec.max() >= a:
                raise ValueError(f"action out of range [0,{a})")
            for row, v in enumerate(order):
                feats[row, col + vec[v]] = 1.0
        col += a
    return feats
