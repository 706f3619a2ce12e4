import json

import numpy as np
import pytest

from graphopt.costmodel import (
    DeviceSpec,
    DeviceTopology,
    LinkSpec,
    OpCost,
    TopologyError,
    fused_cost,
    graph_op_cost,
    kernel_time,
    load_topology,
    op_cost,
    transfer_time,
    uniform_topology,
)
from graphopt.graph import OpNode, TensorEdge

from conftest import make_graph, random_graph


def dev(peak=1e9, bw=4e9, cap=1e12):
    return DeviceSpec(0, peak, bw, cap)


class TestKernelTime:
    def test_compute_bound(self):
        assert kernel_time(OpCost(4e6, 8e6), dev()) == pytest.approx(4e-3)

    def test_zero_cost(self):
        assert kernel_time(OpCost(0, 0), dev()) == 0.0

    def test_memory_bound(self):
        assert kernel_time(OpCost(1e6, 1e9), dev(peak=1e12, bw=1e9)) == pytest.approx(1.0)

    def test_monotone(self, rng):
        d = dev()
        for _ in range(50):
            f, b = rng.uniform(0, 1e9, 2)
            base = kernel_time(OpCost(f, b), d)
            assert kernel_time(OpCost(f * 2, b), d) >= base
            assert kernel_time(OpCost(f, b * 2), d) >= base


class TestTransferTime:
    def test_basic(self):
        assert transfer_time(1e9, LinkSpec(0, 1, 1e10)) == pytest.approx(0.1)

    def test_zero_bytes(self):
        assert transfer_time(0, LinkSpec(0, 1, 1e10)) == 0.0

    def test_same_device_free(self):
        assert transfer_time(1e9, LinkSpec(2, 2, 1e10)) == 0.0


class TestOpCost:
    def test_sum_rule(self):
        node = OpNode(0, "relu", flops=10, output_bytes=8)
        assert op_cost(node, [TensorEdge(1, 0, 4)]) == OpCost(10, 12)

    def test_source(self):
        node = OpNode(0, "matmul", flops=100, output_bytes=8)
        assert op_cost(node, []) == OpCost(100, 8)

    def test_sink_two_inputs(self):
        node = OpNode(0, "reduce", flops=5, output_bytes=0)
        cost = op_cost(node, [TensorEdge(1, 0, 4), TensorEdge(2, 0, 4)])
        assert cost.bytes_accessed == 8


def fig2_graph():
    """Mul -> Reduce -> Sigmoid with two big external inputs into Mul."""
    return make_graph(
        [
            {"op": "other", "out_bytes": 1e6},          # 0: input a
            {"op": "other", "out_bytes": 1e6},          # 1: input b
            {"op": "elementwise-mul", "flops": 2.5e5, "out_bytes": 1e6},  # 2: Mul
            {"op": "reduce", "flops": 2.5e5, "out_bytes": 1e3},           # 3: Reduce
            {"op": "sigmoid", "flops": 2.5e2, "out_bytes": 1e3},          # 4: Sigmoid
        ],
        [(0, 2), (1, 2), (2, 3), (3, 4)],
        name="fig2",
    )


class TestFusedCost:
    def test_intermediate_elision(self):
        g = fig2_graph()
        cost = fused_cost(
            [g.nodes[2], g.nodes[3]],
            internal_edges=[g.edges[2]],
            external_in=[g.edges[0], g.edges[1]],
            external_out=[g.edges[3]],
        )
        assert cost.bytes_accessed == pytest.approx(2.001e6)
        assert cost.flops == pytest.approx(5e5)

    def test_singleton_equals_op_cost(self, rng):
        for _ in range(20):
            g = random_graph(rng, int(rng.integers(2, 12)))
            for v in range(g.num_nodes):
                single = fused_cost([g.nodes[v]], [], g.in_edges(v), g.out_edges(v))
                assert single == graph_op_cost(g, v)

    def test_zero_external_edges(self):
        # the whole fig2-style group, sink produces nothing
        nodes = [
            OpNode(0, "elementwise-mul", flops=10, output_bytes=100),
            OpNode(1, "reduce", flops=5, output_bytes=0),
        ]
        inner = [TensorEdge(0, 1, 100)]
        assert fused_cost(nodes, inner, [], []).bytes_accessed == 0.0

    def test_never_exceeds_unfused(self, rng):
        for _ in range(50):
            g = random_graph(rng, int(rng.integers(2, 12)))
            members = sorted(rng.choice(g.num_nodes,
                                        size=int(rng.integers(1, g.num_nodes + 1)),
                                        replace=False).tolist())
            mset = set(members)
            internal = [e for e in g.edges if e.src in mset and e.dst in mset]
            ext_in = [e for e in g.edges if e.dst in mset and e.src not in mset]
            ext_out = [e for e in g.edges if e.src in mset and e.dst not in mset]
            fused = fused_cost([g.nodes[v] for v in members], internal, ext_in, ext_out)
            unfused = sum(graph_op_cost(g, v).bytes_accessed for v in members)
            assert fused.bytes_accessed <= unfused + 1e-9

    def test_partition_validated(self):
        nodes = [OpNode(0, "relu", output_bytes=4)]
        with pytest.raises(ValueError):
            fused_cost(nodes, [TensorEdge(0, 5, 4)], [], [])
        with pytest.raises(ValueError):
            fused_cost([], [], [], [])


class TestMemoryBoundFusion:
    def test_fused_kernel_time_not_worse(self, rng):
        # memory-bound device: bytes dominate, so eliding traffic always helps
        d = DeviceSpec(0, 1e15, 1e9, 1e12)
        for _ in range(20):
            g = random_graph(rng, 6, p_edge=0.5)
            members = [2, 3, 4]
            mset = set(members)
            internal = [e for e in g.edges if e.src in mset and e.dst in mset]
            ext_in = [e for e in g.edges if e.dst in mset and e.src not in mset]
            ext_out = [e for e in g.edges if e.src in mset and e.dst not in mset]
            fused = fused_cost([g.nodes[v] for v in members], internal, ext_in, ext_out)
            parts = sum(kernel_time(graph_op_cost(g, v), d) for v in members)
            assert kernel_time(fused, d) <= parts + 1e-12


class TestTopology:
    def test_uniform(self):
        top = uniform_topology(3, link_bw=5e9)
        assert top.num_devices == 3
        assert top.link(0, 2).bandwidth == 5e9
        with pytest.raises(TopologyError):
            top.link(1, 1)

    def test_file_roundtrip(self, tmp_path):
        top = uniform_topology(2)
        path = tmp_path / "top.json"
        top.save(path)
        loaded = load_topology(path)
        assert loaded.num_devices == 2
        assert loaded.link(0, 1).bandwidth == top.link(0, 1).bandwidth
        assert loaded.device(0) == top.device(0)

    def test_uniform_bandwidth_file(self, tmp_path):
        path = tmp_path / "top.json"
        path.write_text(json.dumps({
            "devices": [
                {"id": 0, "peak_flops": 1e9, "mem_bw": 1e9, "mem_capacity": 1e9},
                {"id": 1, "peak_flops": 1e9, "mem_bw": 1e9, "mem_capacity": 1e9},
            ],
            "links": {"uniform_bandwidth": 2e9},
        }))
        assert load_topology(path).link(1, 0).bandwidth == 2e9

    def test_missing_link_rejected(self):
        devs = [DeviceSpec(0, 1, 1, 1), DeviceSpec(1, 1, 1, 1)]
        with pytest.raises(TopologyError, match="no link"):
            DeviceTopology(devs, links=[LinkSpec(0, 1, 1.0)])

    def test_invalid_device(self):
        with pytest.raises(TopologyError):
            DeviceSpec(0, 0, 1, 1)
        with pytest.raises(TopologyError):
            LinkSpec(0, 1, 0)
