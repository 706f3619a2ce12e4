"""Shared builders for hand-made graphs, topologies, and random instances."""

from __future__ import annotations

import numpy as np
import pytest

from graphopt.costmodel import DeviceSpec, DeviceTopology
from graphopt.graph import BYTES_PER_ELEMENT, OP_TYPES, ComputationGraph, OpNode, TensorEdge

FUSIBLE_OPS = ("elementwise-add", "elementwise-mul", "reduce", "sigmoid", "relu", "softmax")


def make_node(nid, op="elementwise-add", flops=0.0, out_bytes=0.0, colocate=None):
    return OpNode(nid, op, output_shape=(), flops=flops, output_bytes=out_bytes,
                  colocation_group=colocate)


def make_graph(node_specs, edge_specs, name="test"):
    """node_specs: list of dicts for make_node; edge_specs: (src, dst) or
    (src, dst, bytes) tuples; bytes default to the source's output."""
    nodes = [make_node(i, **spec) for i, spec in enumerate(node_specs)]
    edges = []
    for e in edge_specs:
        src, dst = e[0], e[1]
        b = e[2] if len(e) > 2 else nodes[src].output_bytes
        edges.append(TensorEdge(src, dst, b))
    return ComputationGraph(nodes, edges, name=name)


def chain_graph(costs, op="elementwise-add", name="chain"):
    """Linear chain; costs = list of (flops, out_bytes)."""
    specs = [{"op": op, "flops": f, "out_bytes": b} for f, b in costs]
    edges = [(i, i + 1) for i in range(len(costs) - 1)]
    return make_graph(specs, edges, name=name)


def random_graph(rng, n, p_edge=0.35, max_flops=1e8, max_bytes=1e7,
                 fusible_only=False, name="random"):
    """Random DAG: edges only run forward in id order."""
    ops = FUSIBLE_OPS if fusible_only else OP_TYPES
    specs = []
    for _ in range(n):
        specs.append({
            "op": ops[int(rng.integers(len(ops)))],
            "flops": float(rng.uniform(0, max_flops)),
            "out_bytes": float(rng.integers(1, max_bytes)),
        })
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p_edge:
                edges.append((i, j))
    return make_graph(specs, edges, name=name)


def simple_topology(num_devices=2, peak=1e9, bw=1e10, capacity=1e12, link_bw=1e10):
    devices = [DeviceSpec(i, peak, bw, capacity) for i in range(num_devices)]
    return DeviceTopology(devices, uniform_bandwidth=link_bw)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
