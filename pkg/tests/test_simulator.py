import numpy as np
import pytest

from graphopt.costmodel import DeviceSpec, DeviceTopology, kernel_time
from graphopt.graph import ComputationGraph, OpNode, TensorEdge
from graphopt.simulator import (
    ActionAssignment,
    FusedGraph,
    FusionConfig,
    apply_fusion,
    check_validity,
    evaluate_assignments,
    simulate,
    singleton_fused,
    write_trace_csv,
)

from conftest import make_graph, random_graph, simple_topology


def asg(task, actions, a):
    return ActionAssignment(task, np.array(actions), a)


def no_fusion(n):
    return ActionAssignment.constant("fusion_priority", n, 8, 0)


def equal_priorities(n):
    return ActionAssignment.constant("schedule_priority", n, 8, 0)


def contracted_is_acyclic(graph: ComputationGraph, group_map) -> bool:
    """Brute-force oracle: DFS cycle check on the contracted multigraph."""
    groups = sorted(set(int(g) for g in group_map))
    succ = {g: set() for g in groups}
    for e in graph.edges:
        gs, gd = int(group_map[e.src]), int(group_map[e.dst])
        if gs != gd:
            succ[gs].add(gd)
    state = {g: 0 for g in groups}

    def dfs(u):
        state[u] = 1
        for w in succ[u]:
            if state[w] == 1:
                return False
            if state[w] == 0 and not dfs(w):
                return False
        state[u] = 2
        return True

    return all(state[g] == 2 or dfs(g) for g in groups)


class TestApplyFusion:
    def test_all_zero_priorities_identity(self, rng):
        g = random_graph(rng, 10)
        fg = apply_fusion(g, no_fusion(10))
        assert fg.num_groups == 10
        assert all(len(members) == 1 for members in fg.groups)
        from graphopt.costmodel import graph_op_cost
        for i in range(10):
            assert fg.group_costs[i] == graph_op_cost(g, fg.groups[i][0])

    def fig2_chain(self):
        return make_graph(
            [{"op": "elementwise-mul", "out_bytes": 1e6},
             {"op": "reduce", "out_bytes": 1e3},
             {"op": "sigmoid", "out_bytes": 1e3}],
            [(0, 1), (1, 2)])

    def test_fig2_mul_reduce(self):
        g = self.fig2_chain()
        fg = apply_fusion(g, asg("fusion_priority", [2, 2, 0], 8))
        assert fg.groups == [[0, 1], [2]]

    def test_fig2_reduce_sigmoid(self):
        g = self.fig2_chain()
        fg = apply_fusion(g, asg("fusion_priority", [0, 2, 2], 8))
        assert fg.groups == [[0], [1, 2]]

    def diamond(self):
        return make_graph(
            [{"op": "relu", "out_bytes": 8}, {"op": "relu", "out_bytes": 8},
             {"op": "relu", "out_bytes": 8}, {"op": "relu", "out_bytes": 8}],
            [(0, 1), (0, 2), (1, 3), (2, 3)])

    def test_diamond_legal_three_way_merge(self):
        # visit B(1), D(3), then C(2): {B,D} forms, then C joins legally
        # because A stays outside both paths.
        g = self.diamond()
        fg = apply_fusion(g, asg("fusion_priority", [0, 3, 2, 3], 8))
        assert fg.groups == [[0], [1, 2, 3]]
        assert contracted_is_acyclic(g, fg.group_map)

    def test_diamond_cycle_rejected(self):
        # {A,B} forms first; D then attempts to join via B but the path
        # A->C->D would close a cycle, so D stays single.
        g = self.diamond()
        fg = apply_fusion(g, asg("fusion_priority", [3, 3, 0, 2], 8))
        assert fg.groups == [[0, 1], [2], [3]]
        assert contracted_is_acyclic(g, fg.group_map)

    def test_priority_zero_never_fuses(self):
        g = self.fig2_chain()
        fg = apply_fusion(g, asg("fusion_priority", [0, 0, 0], 8))
        assert fg.num_groups == 3

    def test_non_fusible_ops_stay_single(self):
        g = make_graph(
            [{"op": "matmul", "out_bytes": 8}, {"op": "conv", "out_bytes": 8},
             {"op": "embed-lookup", "out_bytes": 8}, {"op": "other", "out_bytes": 8}],
            [(0, 1), (1, 2), (2, 3)])
        fg = apply_fusion(g, asg("fusion_priority", [7, 7, 7, 7], 8))
        assert fg.num_groups == 4

    def test_max_group_respected(self):
        g = make_graph([{"op": "relu", "out_bytes": 4}] * 6,
                       [(i, i + 1) for i in range(5)])
        fg = apply_fusion(g, asg("fusion_priority", [1] * 6, 8), FusionConfig(max_group=2))
        assert all(len(m) <= 2 for m in fg.groups)

    def test_random_graphs_always_acyclic(self, rng):
        for _ in range(30):
            g = random_graph(rng, int(rng.integers(4, 15)), fusible_only=True)
            pri = rng.integers(0, 8, size=g.num_nodes)
            fg = apply_fusion(g, ActionAssignment("fusion_priority", pri, 8))
            assert contracted_is_acyclic(g, fg.group_map)
            assert sorted(v for m in fg.groups for v in m) == list(range(g.num_nodes))

    def test_wrong_task_rejected(self):
        g = self.fig2_chain()
        with pytest.raises(ValueError):
            apply_fusion(g, equal_priorities(3))


def one_second_node():
    # flops 1e9 on a 1e9-peak device = 1.0 s; bytes small enough not to bind
    return {"op": "matmul", "flops": 1e9, "out_bytes": 1e9}


class TestSimulate:
    def test_single_group_single_device(self):
        g = make_graph([one_second_node()], [])
        top = simple_topology(1)
        fg = singleton_fused(g)
        res = simulate(fg, asg("placement", [0], 1), equal_priorities(1), top)
        assert res.step_time == pytest.approx(
            kernel_time(fg.group_costs[0], top.device(0)))
        assert res.valid

    def test_two_independent_groups(self):
        g = make_graph([one_second_node(), one_second_node()], [])
        top = simple_topology(2)
        fg = singleton_fused(g)
        spread = simulate(fg, asg("placement", [0, 1], 2), equal_priorities(2), top)
        assert spread.step_time == pytest.approx(1.0)
        stacked = simulate(fg, asg("placement", [0, 0], 2), equal_priorities(2), top)
        assert stacked.step_time == pytest.approx(2.0)

    def test_chain_with_transfer(self):
        # A (1s on dev0) -> 1e9 B over 1e10 B/s link (0.1s) -> B (1s on dev1)
        g = make_graph([one_second_node(), one_second_node()], [(0, 1)])
        top = simple_topology(2, link_bw=1e10)
        fg = singleton_fused(g)
        res = simulate(fg, asg("placement", [0, 1], 2), equal_priorities(2), top,
                       record_trace=True)
        assert res.step_time == pytest.approx(2.1)
        kinds = [(ev.kind, ev.time_start, ev.time_end) for ev in res.trace]
        assert ("transfer", 1.0, pytest.approx(1.1)) in [
            (k, s, e) for k, s, e in kinds]

    def test_link_serializes_transfers(self):
        # A finishes at t=1 with two consumers on device 1; both tensors
        # queue on the same link (0.1s each) and must go one after another
        g = make_graph([one_second_node(), one_second_node(), one_second_node()],
                       [(0, 1), (0, 2)])
        top = simple_topology(2, link_bw=1e10)
        fg = singleton_fused(g)
        res = simulate(fg, asg("placement", [0, 1, 1], 2), equal_priorities(3), top,
                       record_trace=True)
        transfers = sorted((ev.time_start, ev.time_end) for ev in res.trace
                           if ev.kind == "transfer")
        assert transfers == [(1.0, pytest.approx(1.1)), (pytest.approx(1.1), pytest.approx(1.2))]
        # dev1 then runs B at 1.1 and C after B: 1.1 + 1 + 1 = 3.1
        assert res.step_time == pytest.approx(3.1)

    def test_same_device_transfer_free(self):
        g = make_graph([one_second_node(), one_second_node()], [(0, 1)])
        top = simple_topology(2, link_bw=1e10)
        fg = singleton_fused(g)
        res = simulate(fg, asg("placement", [0, 0], 2), equal_priorities(2), top)
        assert res.step_time == pytest.approx(2.0)

    def test_single_device_serializes_to_sum(self, rng):
        for _ in range(10):
            g = random_graph(rng, int(rng.integers(2, 12)))
            top = simple_topology(1)
            fg = singleton_fused(g)
            res = simulate(fg, ActionAssignment.constant("placement", g.num_nodes, 1, 0),
                           equal_priorities(g.num_nodes), top)
            total = sum(kernel_time(c, top.device(0)) for c in fg.group_costs)
            assert res.step_time == pytest.approx(total)
            assert res.per_device_busy[0] == pytest.approx(total)

    def test_step_time_at_least_busiest_device(self, rng):
        top = simple_topology(3)
        for _ in range(10):
            g = random_graph(rng, 10)
            fg = singleton_fused(g)
            placement = ActionAssignment("placement", rng.integers(0, 3, 10), 3)
            res = simulate(fg, placement, equal_priorities(10), top)
            assert res.step_time >= max(res.per_device_busy) - 1e-12

    def test_determinism_bit_identical(self, rng):
        top = simple_topology(3)
        for _ in range(10):
            g = random_graph(rng, 12)
            fg = singleton_fused(g)
            placement = ActionAssignment("placement", rng.integers(0, 3, 12), 3)
            pri = ActionAssignment("schedule_priority", rng.integers(0, 8, 12), 8)
            a = simulate(fg, placement, pri, top, record_trace=True)
            b = simulate(fg, placement, pri, top, record_trace=True)
            assert a.step_time == b.step_time
            assert a.per_device_busy == b.per_device_busy
            assert a.peak_mem == b.peak_mem
            assert a.trace == b.trace

    def test_equal_priorities_match_fifo_trace(self, rng):
        top = simple_topology(2)
        for _ in range(10):
            g = random_graph(rng, 10)
            fg = singleton_fused(g)
            placement = ActionAssignment("placement", rng.integers(0, 2, 10), 2)
            pr = simulate(fg, placement, equal_priorities(10), top, policy="priority",
                          record_trace=True)
            ff = simulate(fg, placement, equal_priorities(10), top, policy="fifo",
                          record_trace=True)
            assert pr.trace == ff.trace
            assert pr.step_time == ff.step_time

    def test_priorities_change_order(self):
        # two ready groups on one device: the higher priority one runs first
        g = make_graph([one_second_node(), one_second_node()], [])
        top = simple_topology(1)
        fg = singleton_fused(g)
        res = simulate(fg, asg("placement", [0, 0], 1),
                       asg("schedule_priority", [0, 5], 8), top, record_trace=True)
        first = [ev for ev in res.trace if ev.time_start == 0.0][0]
        assert first.group_id == 1

    def test_removing_node_never_helps_single_device(self, rng):
        top = simple_topology(1)
        for _ in range(5):
            g = random_graph(rng, 8)
            fg = singleton_fused(g)
            full = simulate(fg, ActionAssignment.constant("placement", 8, 1, 0),
                            equal_priorities(8), top).step_time
            drop = 7
            keep = [v for v in range(8) if v != drop]
            remap = {v: i for i, v in enumerate(keep)}
            nodes = [OpNode(remap[v], g.nodes[v].op_type, g.nodes[v].output_shape,
                            g.nodes[v].flops, g.nodes[v].output_bytes) for v in keep]
            edges = [TensorEdge(remap[e.src], remap[e.dst], e.bytes) for e in g.edges
                     if e.src != drop and e.dst != drop]
            sub = ComputationGraph(nodes, edges)
            small = simulate(singleton_fused(sub),
                             ActionAssignment.constant("placement", 7, 1, 0),
                             equal_priorities(7), top).step_time
            assert small <= full + 1e-12

    def test_oom_violation(self):
        g = make_graph([{"op": "relu", "flops": 1, "out_bytes": 100}], [])
        top = simple_topology(1, capacity=10)
        res = simulate(singleton_fused(g), asg("placement", [0], 1),
                       equal_priorities(1), top)
        assert not res.valid
        assert res.violation == "oom"
        assert res.step_time > 0

    def test_memory_freed_after_last_consumer(self):
        # A feeds B and C; A's output stays resident until both finish.
        g = make_graph(
            [{"op": "relu", "flops": 1e9, "out_bytes": 60},
             {"op": "relu", "flops": 1e9, "out_bytes": 60},
             {"op": "relu", "flops": 1e9, "out_bytes": 60}],
            [(0, 1), (0, 2)])
        top = simple_topology(1, capacity=1000)
        res = simulate(singleton_fused(g), asg("placement", [0, 0, 0], 1),
                       equal_priorities(3), top)
        # serial order A,B,C: A lives [1,3]; B and C (no consumers) flash at
        # their own completions, overlapping A but never each other -> 120
        assert res.peak_mem[0] == pytest.approx(120)

    def test_colocation_violation_still_reports_time(self):
        g = make_graph(
            [{"op": "relu", "flops": 1e9, "out_bytes": 8, "colocate": "g"},
             {"op": "relu", "flops": 1e9, "out_bytes": 8, "colocate": "g"}],
            [])
        top = simple_topology(2)
        res = simulate(singleton_fused(g), asg("placement", [0, 1], 2),
                       equal_priorities(2), top)
        assert not res.valid
        assert res.violation == "colocation"
        assert res.step_time == pytest.approx(1.0)

    def test_malformed_lengths(self):
        g = make_graph([{"op": "relu"}], [])
        top = simple_topology(1)
        with pytest.raises(ValueError, match="length"):
            simulate(singleton_fused(g), asg("placement", [0, 0], 1),
                     equal_priorities(1), top)

    def test_fused_graph_cycle_flagged(self):
        g = make_graph([{"op": "relu", "out_bytes": 4}] * 3, [(0, 1), (1, 2), (0, 2)])
        fg = FusedGraph(g, np.array([0, 1, 0]))  # hand-built illegal grouping
        assert fg.topo_index is None
        res = simulate(fg, asg("placement", [0, 0, 0], 1), equal_priorities(3),
                       simple_topology(1))
        assert not res.valid
        assert res.violation == "cycle_after_fusion"


class TestCheckValidity:
    def test_colocated_same_device_ok(self):
        g = make_graph([{"colocate": "g"}, {"colocate": "g"}], [])
        assert check_validity(g, asg("placement", [1, 1], 2), simple_topology(2)) == []

    def test_colocated_split(self):
        g = make_graph([{"colocate": "g"}, {"colocate": "g"}], [])
        out = check_validity(g, asg("placement", [0, 1], 2), simple_topology(2))
        assert out == ["colocation"]

    def test_out_of_range(self):
        g = make_graph([{}], [])
        out = check_validity(g, asg("placement", [2], 4), simple_topology(2))
        assert out == ["out-of-range"]


class TestEvaluateAssignments:
    def test_requires_all_tasks(self):
        g = make_graph([{}], [])
        with pytest.raises(ValueError, match="missing"):
            evaluate_assignments(g, simple_topology(1),
                                 {"placement": asg("placement", [0], 1)})

    def test_full_pipeline(self):
        g = make_graph([one_second_node(), one_second_node()], [(0, 1)])
        top = simple_topology(1)
        res = evaluate_assignments(g, top, {
            "placement": asg("placement", [0, 0], 1),
            "schedule_priority": equal_priorities(2),
            "fusion_priority": no_fusion(2),
        })
        assert res.step_time == pytest.approx(2.0)


def test_trace_csv_sorted(tmp_path, rng):
    g = random_graph(rng, 8)
    top = simple_topology(2)
    fg = singleton_fused(g)
    res = simulate(fg, ActionAssignment("placement", rng.integers(0, 2, 8), 2),
                   equal_priorities(8), top, record_trace=True)
    path = tmp_path / "trace.csv"
    write_trace_csv(res.trace, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "time_start,time_end,device,kind,group_id"
    starts = [float(l.split(",")[0]) for l in lines[1:]]
    assert starts == sorted(starts)
