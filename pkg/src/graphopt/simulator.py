"""Deterministic discrete-event simulation of a fused graph on a device
topology, plus the greedy fusion pass that builds the fused graph.

Model: each device executes one group at a time; each directed device pair
has one link that serializes transfers in enqueue order; transfers start
when the producer finishes and overlap compute. A group is ready once every
external input has arrived at its device. Identical inputs always produce
bit-identical results, including the event trace.
"""

from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .costmodel import DeviceTopology, OpCost, fused_cost, kernel_time
from .graph import ComputationGraph, TensorEdge

TASKS = ("placement", "schedule_priority", "fusion_priority")
NUM_PRIORITY_LEVELS = 8

# Ops that may take part in a fused group; compute-heavy and opaque ops may not.
NON_FUSIBLE = frozenset({"matmul", "conv", "embed-lookup", "other"})


@dataclass
class ActionAssignment:
    """One integer decision per node for a single task.

    Length and dtype are enforced here; value ranges are checked where the
    assignment is consumed (see check_validity), so that out-of-range files
    can be loaded and reported rather than rejected at parse time.
    """

    task: str
    actions: np.ndarray
    num_actions: int

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.ndim != 1:
            raise ValueError("actions must be a 1-D vector")
        if self.num_actions <= 0:
            raise ValueError("action space must be non-empty")

    @classmethod
    def constant(cls, task: str, num_nodes: int, num_actions: int, value: int = 0):
        return cls(task, np.full(num_nodes, value, dtype=np.int64), num_actions)

    def __len__(self):
        return len(self.actions)


@dataclass
class TraceEvent:
    time_start: float
    time_end: float
    device: str
    kind: str  # "compute" | "transfer"
    group_id: int


@dataclass
class SimResult:
    step_time: float
    valid: bool
    violation: str | None
    per_device_busy: list[float]
    peak_mem: list[float]
    trace: list[TraceEvent] | None = None


@dataclass
class FusionConfig:
    max_group: int = 8
    num_levels: int = NUM_PRIORITY_LEVELS


class FusedGraph:
    """Original graph contracted into fused groups.

    Groups are indexed by ascending lowest member id. Edges between groups
    keep one entry per original external edge (transfers are per tensor)."""

    def __init__(self, graph: ComputationGraph, group_map: np.ndarray):
        self.graph = graph
        self.group_map = np.asarray(group_map, dtype=np.int64)
        n = graph.num_nodes
        if self.group_map.shape != (n,):
            raise ValueError("group_map must assign every node to a group")
        roots = sorted(set(self.group_map.tolist()))
        remap = {r: i for i, r in enumerate(roots)}
        self.group_map = np.array([remap[g] for g in self.group_map], dtype=np.int64)
        g = len(roots)
        self.groups: list[list[int]] = [[] for _ in range(g)]
        for v in range(n):
            self.groups[self.group_map[v]].append(v)
        # canonical order: ascending min member id
        order = sorted(range(g), key=lambda i: self.groups[i][0])
        pos = {old: new for new, old in enumerate(order)}
        self.groups = [sorted(self.groups[i]) for i in order]
        self.group_map = np.array([pos[g_] for g_ in self.group_map], dtype=np.int64)

        self.internal_edges: list[list[TensorEdge]] = [[] for _ in range(g)]
        self.external_in: list[list[TensorEdge]] = [[] for _ in range(g)]
        self.external_out: list[list[TensorEdge]] = [[] for _ in range(g)]
        for e in graph.edges:
            gs, gd = int(self.group_map[e.src]), int(self.group_map[e.dst])
            if gs == gd:
                self.internal_edges[gs].append(e)
            else:
                self.external_out[gs].append(e)
                self.external_in[gd].append(e)
        for lst in self.external_out:
            lst.sort(key=lambda e: (e.src, e.dst))
        self.group_costs: list[OpCost] = [
            fused_cost(
                [graph.nodes[v] for v in self.groups[i]],
                self.internal_edges[i],
                self.external_in[i],
                self.external_out[i],
            )
            for i in range(g)
        ]
        # bytes living in device memory after the group completes
        self.resident_bytes: list[float] = []
        for i in range(g):
            members = set(self.groups[i])
            total = 0.0
            for v in self.groups[i]:
                outs = graph.out_edges(v)
                if not outs or any(e.dst not in members for e in outs):
                    total += graph.nodes[v].output_bytes
            self.resident_bytes.append(total)
        self.group_succ: list[set[int]] = [set() for _ in range(g)]
        self.group_pred: list[set[int]] = [set() for _ in range(g)]
        for i in range(g):
            for e in self.external_out[i]:
                j = int(self.group_map[e.dst])
                self.group_succ[i].add(j)
                self.group_pred[j].add(i)
        self.topo_index = self._compute_topo_index()

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def _compute_topo_index(self) -> list[int] | None:
        g = self.num_groups
        indeg = [len(p) for p in self.group_pred]
        heap = [i for i in range(g) if indeg[i] == 0]
        heapq.heapify(heap)
        index = [0] * g
        seen = 0
        while heap:
            i = heapq.heappop(heap)
            index[i] = seen
            seen += 1
            for j in sorted(self.group_succ[i]):
                indeg[j] -= 1
                if indeg[j] == 0:
                    heapq.heappush(heap, j)
        if seen != g:
            return None
        return index


def singleton_fused(graph: ComputationGraph) -> FusedGraph:
    """The no-fusion identity: every node is its own group."""
    return FusedGraph(graph, np.arange(graph.num_nodes))


def _would_create_cycle(succ: dict[int, set[int]], a: int, b: int) -> bool:
    """True if merging groups a and b would close a directed cycle, i.e.
    some path between them passes through a third group."""
    for x, y in ((a, b), (b, a)):
        stack = [s for s in succ[x] if s != y]
        seen = set(stack)
        while stack:
            s = stack.pop()
            if s == y:
                return True
            for t in succ[s]:
                if t == y:
                    return True
                if t not in seen:
                    seen.add(t)
                    stack.append(t)
    return False


def apply_fusion(
    graph: ComputationGraph,
    fusion: ActionAssignment,
    config: FusionConfig | None = None,
) -> FusedGraph:
    """Greedy fusion pass driven by per-node fusion priorities.

    Nodes are visited in descending priority (ties by ascending id). Each
    node attempts to merge its group with the group of its best (highest
    priority, then lowest id) already-visited producer/consumer neighbor,
    provided both ops are fusible types, both priorities are non-zero, the
    merged group stays within max_group, and the group graph stays acyclic.
    Illegal attempts are skipped, never errors.
    """
    config = config or FusionConfig()
    if fusion.task != "fusion_priority":
        raise ValueError(f"expected fusion_priority actions, got {fusion.task}")
    n = graph.num_nodes
    if len(fusion) != n:
        raise ValueError(f"fusion actions have length {len(fusion)}, want {n}")
    pri = fusion.actions

    parent = list(range(n))

    def find(v: int) -> int:
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    size = [1] * n
    succ: dict[int, set[int]] = {v: set() for v in range(n)}
    pred: dict[int, set[int]] = {v: set() for v in range(n)}
    for e in graph.edges:
        succ[e.src].add(e.dst)
        pred[e.dst].add(e.src)

    visited = [False] * n
    order = sorted(range(n), key=lambda v: (-pri[v], v))
    for v in order:
        if pri[v] > 0 and graph.nodes[v].op_type not in NON_FUSIBLE:
            cands = [
                u
                for u in graph.neighbors(v)
                if visited[u] and pri[u] > 0 and graph.nodes[u].op_type not in NON_FUSIBLE
            ]
            if cands:
                u = min(cands, key=lambda u: (-pri[u], u))
                rv, ru = find(v), find(u)
                if (
                    rv != ru
                    and size[rv] + size[ru] <= config.max_group
                    and not _would_create_cycle(succ, rv, ru)
                ):
                    # union: keep the larger root; fold adjacency sets
                    if size[rv] < size[ru]:
                        rv, ru = ru, rv
                    parent[ru] = rv
                    size[rv] += size[ru]
                    new_succ = (succ[rv] | succ[ru]) - {rv, ru}
                    new_pred = (pred[rv] | pred[ru]) - {rv, ru}
                    for s in succ[ru]:
                        pred[s].discard(ru)
                    for s in pred[ru]:
                        succ[s].discard(ru)
                    for s in succ[rv]:
                        pred[s].discard(rv)
                    for s in pred[rv]:
                        succ[s].discard(rv)
                    succ[rv] = new_succ
                    pred[rv] = new_pred
                    for s in new_succ:
                        pred[s].add(rv)
                    for s in new_pred:
                        succ[s].add(rv)
                    del succ[ru], pred[ru]
        visited[v] = True

    return FusedGraph(graph, np.array([find(v) for v in range(n)]))


def simulate(
    fg: FusedGraph,
    placement: ActionAssignment,
    priorities: ActionAssignment,
    topology: DeviceTopology,
    policy: str = "priority",
    record_trace: bool = False,
) -> SimResult:
    """Run the virtual scheduler and return step time, utilization, memory
    peaks, and validity. Group placement/priority come from the group's
    lowest-id member; colocation is checked on original nodes."""
    if policy not in ("fifo", "priority"):
        raise ValueError(f"unknown policy {policy!r}")
    graph = fg.graph
    n = graph.num_nodes
    d = topology.num_devices
    for asg, task in ((placement, "placement"), (priorities, "schedule_priority")):
        if asg.task != task:
            raise ValueError(f"expected {task} actions, got {asg.task}")
        if len(asg) != n:
            raise ValueError(f"{task} actions have length {len(asg)}, want {n} nodes")
    if placement.actions.min(initial=0) < 0 or placement.actions.max(initial=0) >= d:
        raise ValueError(f"placement action out of range [0,{d})")

    g = fg.num_groups
    group_dev = [int(placement.actions[fg.groups[i][0]]) for i in range(g)]
    group_pri = [int(priorities.actions[fg.groups[i][0]]) for i in range(g)]

    violation = None
    coloc: dict[str, set[int]] = {}
    for v in range(n):
        grp = graph.nodes[v].colocation_group
        if grp is not None:
            coloc.setdefault(grp, set()).add(group_dev[int(fg.group_map[v])])
    if any(len(devs) > 1 for devs in coloc.values()):
        violation = "colocation"

    if fg.topo_index is None:
        return SimResult(0.0, False, "cycle_after_fusion", [0.0] * d, [0.0] * d,
                         [] if record_trace else None)
    topo_index = fg.topo_index

    pending = [len(fg.external_in[i]) for i in range(g)]
    finish = [0.0] * g
    ready_time = [0.0] * g
    busy = [0.0] * d
    running: list[int | None] = [None] * d
    queues: list[list[tuple]] = [[] for _ in range(d)]
    links: dict[tuple[int, int], deque] = {}
    link_busy: dict[tuple[int, int], bool] = {}
    trace: list[TraceEvent] = []
    events: list[tuple] = []  # (time, sort_key..., kind, payload)
    seq = 0
    done = 0

    def queue_key(i: int) -> tuple:
        if policy == "priority":
            return (-group_pri[i], ready_time[i], topo_index[i])
        return (ready_time[i], topo_index[i])

    def mark_ready(i: int, t: float):
        ready_time[i] = t
        heapq.heappush(queues[group_dev[i]], (*queue_key(i), i))

    def deliver(i: int, t: float):
        pending[i] -= 1
        if pending[i] == 0:
            mark_ready(i, t)

    for i in range(g):
        if pending[i] == 0:
            mark_ready(i, 0.0)

    def schedule(t: float):
        nonlocal seq
        for key in sorted(links):
            if not link_busy[key] and links[key]:
                edge, dst_group = links[key].popleft()
                link_busy[key] = True
                dt = edge.bytes / topology.link(*key).bandwidth
                if record_trace:
                    trace.append(TraceEvent(t, t + dt, f"{key[0]}->{key[1]}",
                                            "transfer", dst_group))
                seq += 1
                heapq.heappush(events, (t + dt, 1, key[0], key[1], seq, "transfer", dst_group))
        for dev in range(d):
            if running[dev] is None and queues[dev]:
                entry = heapq.heappop(queues[dev])
                i = entry[-1]
                running[dev] = i
                dt = kernel_time(fg.group_costs[i], topology.device(dev))
                busy[dev] += dt
                if record_trace:
                    trace.append(TraceEvent(t, t + dt, str(dev), "compute", i))
                seq += 1
                heapq.heappush(events, (t + dt, 0, dev, i, seq, "compute", i))

    schedule(0.0)
    now = 0.0
    while events:
        now = events[0][0]
        batch = []
        while events and events[0][0] == now:
            batch.append(heapq.heappop(events))
        for ev in batch:
            kind = ev[5]
            if kind == "compute":
                i = ev[6]
                dev = ev[2]
                running[dev] = None
                finish[i] = now
                done += 1
                for e in fg.external_out[i]:
                    gd = int(fg.group_map[e.dst])
                    if group_dev[gd] == dev:
                        deliver(gd, now)
                    else:
                        key = (dev, group_dev[gd])
                        if key not in links:
                            links[key] = deque()
                            link_busy[key] = False
                        links[key].append((e, gd))
            else:
                key = (ev[2], ev[3])
                link_busy[key] = False
                deliver(ev[6], now)
        schedule(now)

    step_time = max(finish) if g else 0.0
    assert done == g, "simulation deadlocked"

    peak = [0.0] * d
    mem_events: list[list[tuple[float, int, float]]] = [[] for _ in range(d)]
    for i in range(g):
        if fg.resident_bytes[i] == 0.0:
            continue
        consumers = sorted(fg.group_succ[i])
        freed = max((finish[c] for c in consumers), default=finish[i])
        dev = group_dev[i]
        mem_events[dev].append((finish[i], 0, fg.resident_bytes[i]))
        mem_events[dev].append((freed, 1, -fg.resident_bytes[i]))
    for dev in range(d):
        cur = 0.0
        for _, _, delta in sorted(mem_events[dev]):
            cur += delta
            peak[dev] = max(peak[dev], cur)
    if violation is None:
        for dev in range(d):
            if peak[dev] > topology.device(dev).mem_capacity:
                violation = "oom"
                break

    if record_trace:
        trace.sort(key=lambda ev: (ev.time_start, ev.time_end, ev.kind, ev.device, ev.group_id))
    return SimResult(
        step_time=step_time,
        valid=violation is None,
        violation=violation,
        per_device_busy=busy,
        peak_mem=peak,
        trace=trace if record_trace else None,
    )


def check_validity(
    graph: ComputationGraph,
    placement: ActionAssignment,
    topology: DeviceTopology,
) -> list[str]:
    """Static re-check: placement-range and colocation only. The dynamic
    memory peak from simulate is the authority for OOM."""
    violations = []
    d = topology.num_devices
    if len(placement) != graph.num_nodes:
        violations.append("length-mismatch")
        return violations
    acts = placement.actions
    if acts.min(initial=0) < 0 or acts.max(initial=0) >= d:
        violations.append("out-of-range")
        return violations
    coloc: dict[str, set[int]] = {}
    for v in range(graph.num_nodes):
        grp = graph.nodes[v].colocation_group
        if grp is not None:
            coloc.setdefault(grp, set()).add(int(acts[v]))
    for name in sorted(coloc):
        if len(coloc[name]) > 1:
            violations.append("colocation")
            break
    return violations


def evaluate_assignments(
    graph: ComputationGraph,
    topology: DeviceTopology,
    assignments: dict[str, ActionAssignment],
    fusion_config: FusionConfig | None = None,
    policy: str = "priority",
    record_trace: bool = False,
) -> SimResult:
    """Full pipeline: apply the fusion assignment, then simulate under the
    placement and scheduling assignments. All three tasks must be present."""
    missing = [t for t in TASKS if t not in assignments]
    if missing:
        raise ValueError(f"assignments missing tasks: {missing}")
    fg = apply_fusion(graph, assignments["fusion_priority"], fusion_config)
    return simulate(fg, assignments["placement"], assignments["schedule_priority"],
                    topology, policy=policy, record_trace=record_trace)


def write_trace_csv(trace: list[TraceEvent], path: str | Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_start", "time_end", "device", "kind", "group_id"])
        for ev in sorted(trace, key=lambda e: (e.time_start, e.time_end, e.kind, e.device)):
            writer.writerow([repr(ev.time_start), repr(ev.time_end), ev.device,
                             ev.kind, ev.group_id])
