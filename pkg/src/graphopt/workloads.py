"""Synthetic workload generators.

Six families of desk-scale dataflow graphs that mimic the topological
character of common model architectures: recurrent grids, encoder-decoder
grids with attention, attention block stacks, multi-branch vision blocks,
cell stacks with skip inputs, and dilated convolution stacks. Node and edge
counts follow closed-form formulas of the size parameters; the seed only
perturbs per-cell tensor widths (costs), never the structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import BYTES_PER_ELEMENT, ComputationGraph, GraphError, OpNode, TensorEdge

FAMILIES = (
    "grid-rnn",
    "enc-dec-rnn",
    "attention-stack",
    "multi-branch-cnn",
    "cell-stack-cnn",
    "dilated-stack",
)

DEFAULT_NODE_CAP = 10_000

# Primitive ops emitted per recurrent cell (grid families).
OPS_PER_CELL = 4


@dataclass(frozen=True)
class WorkloadSpec:
    family: str
    layers: int = 2
    steps: int = 4
    width: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GraphError(f"unknown family {self.family!r}")
        if self.layers <= 0 or self.steps <= 0 or self.width <= 0:
            raise GraphError("size params must be positive")

    @property
    def name(self) -> str:
        return f"{self.family}-L{self.layers}-S{self.steps}-w{self.width}-s{self.seed}"


def expected_node_count(spec: WorkloadSpec) -> int:
    """Closed-form node count per family."""
    L, S = spec.layers, spec.steps
    if spec.family == "grid-rnn":
        return L * S * OPS_PER_CELL
    if spec.family == "enc-dec-rnn":
        return 2 * L * S * OPS_PER_CELL + 2 * S
    if spec.family == "attention-stack":
        return 1 + 10 * L
    if spec.family == "multi-branch-cnn":
        return 1 + 7 * L
    if spec.family == "cell-stack-cnn":
        return 4 * L
    if spec.family == "dilated-stack":
        return 1 + 4 * L * S + 2
    raise GraphError(spec.family)


def expected_edge_count(spec: WorkloadSpec) -> int:
    L, S = spec.layers, spec.steps
    if spec.family == "grid-rnn":
        return L * S * 4 + L * (S - 1) + (L - 1) * S
    if spec.family == "enc-dec-rnn":
        grids = 2 * (L * S * 4 + L * (S - 1) + (L - 1) * S)
        return grids + S * S + S + S
    if spec.family == "attention-stack":
        return 13 * L
    if spec.family == "multi-branch-cnn":
        return 9 * L
    if spec.family == "cell-stack-cnn":
        return 3 * L + 2 * (L - 1)
    if spec.family == "dilated-stack":
        return 6 * L * S + L * S + 1
    raise GraphError(spec.family)


class _Builder:
    def __init__(self, name: str):
        self.name = name
        self.nodes: list[OpNode] = []
        self.edges: list[TensorEdge] = []

    def node(self, op: str, shape: tuple[int, ...], flops: float, colocate=None) -> int:
        nid = len(self.nodes)
        out_bytes = BYTES_PER_ELEMENT * math.prod(shape) if shape else 0.0
        self.nodes.append(
            OpNode(nid, op, output_shape=shape, flops=float(flops),
                   output_bytes=float(out_bytes), colocation_group=colocate)
        )
        return nid

    def edge(self, src: int, dst: int):
        self.edges.append(TensorEdge(src, dst, self.nodes[src].output_bytes))

    def build(self) -> ComputationGraph:
        return ComputationGraph(self.nodes, self.edges, name=self.name)


def _cell_width(rng: np.random.Generator, w: int) -> int:
    # +-25% jitter, floor 4: varies roofline balance across cells.
    return max(4, int(round(w * rng.uniform(0.75, 1.25))))


def _rnn_cell(b: _Builder, w: int, inputs: list[int]) -> int:
    """Four-op recurrent cell: matmul -> add -> sigmoid -> mul (gated).
    Returns the cell output node id."""
    mm = b.node("matmul", (w,), 2.0 * w * w)
    ad = b.node("elementwise-add", (w,), w)
    sg = b.node("sigmoid", (w,), 4.0 * w)
    ml = b.node("elementwise-mul", (w,), w)
    for src in inputs:
        b.edge(src, mm)
    b.edge(mm, ad)
    b.edge(ad, sg)
    b.edge(sg, ml)
    b.edge(ad, ml)
    return ml


def _gen_grid(b: _Builder, rng: np.random.Generator, L: int, S: int, w: int) -> list[list[int]]:
    """L x S grid of cells; cell (l,s) depends on (l-1,s) and (l,s-1)."""
    out = [[-1] * S for _ in range(L)]
    for l in range(L):
        for s in range(S):
            inputs = []
            if l > 0:
                inputs.append(out[l - 1][s])
            if s > 0:
                inputs.append(out[l][s - 1])
            out[l][s] = _rnn_cell(b, _cell_width(rng, w), inputs)
    return out


def _gen_grid_rnn(b, rng, spec):
    _gen_grid(b, rng, spec.layers, spec.steps, spec.width)


def _gen_enc_dec_rnn(b, rng, spec):
    L, S, w = spec.layers, spec.steps, spec.width
    enc = _gen_grid(b, rng, L, S, w)
    dec = _gen_grid(b, rng, L, S, w)
    for s in range(S):
        wa = _cell_width(rng, w)
        att = b.node("matmul", (wa,), 2.0 * wa * wa)
        sm = b.node("softmax", (wa,), 5.0 * wa)
        for s2 in range(S):
            b.edge(enc[L - 1][s2], att)
        b.edge(att, sm)
        # Context feeds the bottom decoder cell's matmul at this step.
        b.edge(sm, dec[0][s] - (OPS_PER_CELL - 1))


def _gen_attention_stack(b, rng, spec):
    B, w = spec.layers, spec.width
    block_in = b.node("embed-lookup", (w,), float(w))
    for _ in range(B):
        wb = _cell_width(rng, w)
        q = b.node("matmul", (wb,), 2.0 * wb * wb)
        k = b.node("matmul", (wb,), 2.0 * wb * wb)
        v = b.node("matmul", (wb,), 2.0 * wb * wb)
        score = b.node("matmul", (wb,), 2.0 * wb * wb)
        sm = b.node("softmax", (wb,), 5.0 * wb)
        ctx = b.node("matmul", (wb,), 2.0 * wb * wb)
        ff1 = b.node("matmul", (4 * wb,), 8.0 * wb * wb)
        rl = b.node("relu", (4 * wb,), 4.0 * wb)
        ff2 = b.node("matmul", (wb,), 8.0 * wb * wb)
        res = b.node("elementwise-add", (wb,), wb)
        for m in (q, k, v):
            b.edge(block_in, m)
        b.edge(q, score)
        b.edge(k, score)
        b.edge(score, sm)
        b.edge(sm, ctx)
        b.edge(v, ctx)
        b.edge(ctx, ff1)
        b.edge(ff1, rl)
        b.edge(rl, ff2)
        b.edge(ff2, res)
        b.edge(block_in, res)
        block_in = res


def _gen_multi_branch_cnn(b, rng, spec):
    B, w = spec.layers, spec.width
    block_in = b.node("embed-lookup", (8, w), 8.0 * w)
    for _ in range(B):
        wb = _cell_width(rng, w)
        outs = []
        for _branch in range(3):
            cv = b.node("conv", (8, wb), 16.0 * wb * wb)
            rl = b.node("relu", (8, wb), 8.0 * wb)
            b.edge(block_in, cv)
            b.edge(cv, rl)
            outs.append(rl)
        cat = b.node("concat", (24, wb), 0.0)
        for o in outs:
            b.edge(o, cat)
        block_in = cat


def _gen_cell_stack_cnn(b, rng, spec):
    C, w = spec.layers, spec.width
    cell_out: list[int] = []
    for c in range(C):
        wb = _cell_width(rng, w)
        ca = b.node("conv", (8, wb), 16.0 * wb * wb)
        cb = b.node("conv", (8, wb), 16.0 * wb * wb)
        ad = b.node("elementwise-add", (8, wb), 8.0 * wb)
        rl = b.node("relu", (8, wb), 8.0 * wb)
        if c >= 1:
            b.edge(cell_out[c - 1], ca)
            b.edge(cell_out[max(0, c - 2)], cb)
        b.edge(ca, ad)
        b.edge(cb, ad)
        b.edge(ad, rl)
        cell_out.append(rl)


def _gen_dilated_stack(b, rng, spec):
    stacks, per_stack, w = spec.layers, spec.steps, spec.width
    prev = b.node("embed-lookup", (w,), float(w))
    skips = []
    for _ in range(stacks * per_stack):
        wb = _cell_width(rng, w)
        cv = b.node("conv", (wb,), 16.0 * wb * wb)
        sg = b.node("sigmoid", (wb,), 4.0 * wb)
        ml = b.node("elementwise-mul", (wb,), wb)
        ad = b.node("elementwise-add", (wb,), wb)
        b.edge(prev, cv)
        b.edge(cv, sg)
        b.edge(sg, ml)
        b.edge(cv, ml)
        b.edge(ml, ad)
        b.edge(prev, ad)
        skips.append(ml)
        prev = ad
    rd = b.node("reduce", (w,), float(w * len(skips)))
    sm = b.node("softmax", (w,), 5.0 * w)
    for s in skips:
        b.edge(s, rd)
    b.edge(rd, sm)


_GENERATORS = {
    "grid-rnn": _gen_grid_rnn,
    "enc-dec-rnn": _gen_enc_dec_rnn,
    "attention-stack": _gen_attention_stack,
    "multi-branch-cnn": _gen_multi_branch_cnn,
    "cell-stack-cnn": _gen_cell_stack_cnn,
    "dilated-stack": _gen_dilated_stack,
}


def gen_workload(spec: WorkloadSpec, node_cap: int = DEFAULT_NODE_CAP) -> ComputationGraph:
    """Generate the graph for `spec`. Deterministic: the same spec always
    produces a byte-identical serialized graph."""
    want = expected_node_count(spec)
    if want > node_cap:
        raise GraphError(f"{spec.name}: {want} nodes exceeds cap {node_cap}")
    rng = np.random.default_rng(spec.seed)
    b = _Builder(spec.name)
    _GENERATORS[spec.family](b, rng, spec)
    graph = b.build()
    assert graph.num_nodes == want, (graph.num_nodes, want)
    assert graph.num_edges == expected_edge_count(spec), (
        graph.num_edges, expected_edge_count(spec))
    return graph
