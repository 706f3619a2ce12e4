"""Non-learned optimizers and oracles: fanout scheduling heuristic, greedy
balanced placement, simulated annealing over action vectors, and exhaustive
brute force for tiny instances."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .costmodel import DeviceTopology
from .graph import ComputationGraph
from .simulator import (
    NUM_PRIORITY_LEVELS,
    TASKS,
    ActionAssignment,
    FusionConfig,
    evaluate_assignments,
)


def default_assignments(
    graph: ComputationGraph,
    topology: DeviceTopology,
    num_levels: int = NUM_PRIORITY_LEVELS,
) -> dict[str, ActionAssignment]:
    """The reference pipeline: greedy balanced placement, all-equal schedule
    priorities (FIFO-equivalent), and no fusion."""
    n = graph.num_nodes
    return {
        "placement": greedy_placement(graph, topology),
        "schedule_priority": ActionAssignment.constant("schedule_priority", n, num_levels, 0),
        "fusion_priority": ActionAssignment.constant("fusion_priority", n, num_levels, 0),
    }


def baseline_step_time(
    graph: ComputationGraph,
    topology: DeviceTopology,
    fusion_config: FusionConfig | None = None,
) -> float:
    """Step time of the default pipeline; the reward normalizer."""
    res = evaluate_assignments(graph, topology, default_assignments(graph, topology),
                               fusion_config)
    return res.step_time


def descendant_counts(graph: ComputationGraph) -> np.ndarray:
    """Number of nodes reachable from each node (excluding itself)."""
    n = graph.num_nodes
    reach = np.zeros((n, n), dtype=bool)
    for v in reversed(graph.topo_order()):
        for w in graph.successors(v):
            reach[v, w] = True
            reach[v] |= reach[w]
    return reach.sum(axis=1)


def fanout_priorities(
    graph: ComputationGraph, num_levels: int = NUM_PRIORITY_LEVELS
) -> ActionAssignment:
    """Schedule priorities proportional to descendant count: ops that many
    other ops depend on get scheduled first."""
    counts = descendant_counts(graph)
    top = int(counts.max(initial=0))
    if top == 0:
        levels = np.zeros(graph.num_nodes, dtype=np.int64)
    else:
        levels = (counts * (num_levels - 1)) // top
    return ActionAssignment("schedule_priority", levels.astype(np.int64), num_levels)


def greedy_placement(graph: ComputationGraph, topology: DeviceTopology) -> ActionAssignment:
    """Split the topological order into |D| contiguous chunks balanced by
    total flops (minimizing the max chunk); chunk i goes to device i.
    Colocation groups are then forced onto their first member's device."""
    n = graph.num_nodes
    d = topology.num_devices
    order = graph.topo_order()
    flops = np.array([graph.nodes[v].flops for v in order], dtype=np.float64)
    prefix = np.concatenate([[0.0], np.cumsum(flops)])

    # dp[k][i]: minimal max-chunk when the first i nodes form k chunks.
    # Ties resolve to the earliest split, so equal-cost plans are canonical.
    inf = math.inf
    dp = np.full(n + 1, inf)
    dp[0] = 0.0
    choice = np.zeros((d + 1, n + 1), dtype=np.int64)
    for k in range(1, d + 1):
        nxt = np.full(n + 1, inf)
        for i in range(n + 1):
            cand = np.maximum(dp[: i + 1], prefix[i] - prefix[: i + 1])
            j = int(np.argmin(cand))
            nxt[i] = cand[j]
            choice[k, i] = j
        dp = nxt
    cuts = [n]
    i = n
    for k in range(d, 0, -1):
        i = int(choice[k, i])
        cuts.append(i)
    cuts.reverse()

    actions = np.zeros(n, dtype=np.int64)
    for dev in range(d):
        for pos in range(cuts[dev], cuts[dev + 1]):
            actions[order[pos]] = dev

    coloc: dict[str, int] = {}
    for v in range(n):
        grp = graph.nodes[v].colocation_group
        if grp is not None:
            if grp not in coloc:
                coloc[grp] = int(actions[v])
            actions[v] = coloc[grp]
    return ActionAssignment("placement", actions, d)


@dataclass
class SAConfig:
    iterations: int = 5000
    initial_temperature: float | None = None  # None: 10% of the initial step time
    cooling_rate: float = 0.999
    moves_per_step: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0.0 < self.cooling_rate < 1.0):
            raise ValueError("cooling_rate must be in (0,1) for a decreasing schedule")
        if self.moves_per_step < 1:
            raise ValueError("moves_per_step must be >= 1")


def _task_action_size(task: str, topology: DeviceTopology, num_levels: int) -> int:
    return topology.num_devices if task == "placement" else num_levels


def simulated_annealing(
    graph: ComputationGraph,
    topology: DeviceTopology,
    tasks: list[str],
    sa: SAConfig | None = None,
    fusion_config: FusionConfig | None = None,
) -> tuple[dict[str, ActionAssignment], float]:
    """Anneal over the concatenated action vectors of the requested tasks.

    A move resamples one node's action for one task uniformly; worse moves
    are accepted with probability exp(-delta/temperature) under geometric
    cooling. Starts from the default assignments and returns the best state
    ever visited (so the result never exceeds the initial step time)."""
    if not tasks:
        raise ValueError("tasks must be non-empty")
    for t in tasks:
        if t not in TASKS:
            raise ValueError(f"unknown task {t!r}")
    sa = sa or SAConfig()
    fusion_config = fusion_config or FusionConfig()
    rng = np.random.default_rng(sa.seed)
    n = graph.num_nodes

    state = default_assignments(graph, topology, fusion_config.num_levels)
    sizes = {t: _task_action_size(t, topology, fusion_config.num_levels) for t in tasks}

    def evaluate(asg: dict[str, ActionAssignment]) -> float:
        res = evaluate_assignments(graph, topology, asg, fusion_config)
        return res.step_time if res.valid else math.inf

    current = {t: state[t].actions.copy() for t in tasks}
    cur_time = evaluate(state)
    best = {t: current[t].copy() for t in tasks}
    best_time = cur_time

    temp = sa.initial_temperature
    if temp is None:
        temp = 0.1 * cur_time if math.isfinite(cur_time) else 1.0

    for _ in range(sa.iterations):
        cand = {t: current[t].copy() for t in tasks}
        for _ in range(sa.moves_per_step):
            t = tasks[int(rng.integers(len(tasks)))]
            v = int(rng.integers(n))
            cand[t][v] = int(rng.integers(sizes[t]))
        asg = dict(state)
        for t in tasks:
            asg[t] = ActionAssignment(t, cand[t], sizes[t])
        cand_time = evaluate(asg)
        delta = cand_time - cur_time
        accept = delta <= 0
        if not accept and temp > 0 and math.isfinite(delta):
            accept = rng.random() < math.exp(-delta / temp)
        if accept:
            current = cand
            cur_time = cand_time
            if cur_time < best_time:
                best_time = cur_time
                best = {t: current[t].copy() for t in tasks}
        temp *= sa.cooling_rate

    result = dict(state)
    for t in tasks:
        result[t] = ActionAssignment(t, best[t], sizes[t])
    return result, best_time


def brute_force(
    graph: ComputationGraph,
    topology: DeviceTopology,
    task: str,
    limit: int = 10**6,
    fusion_config: FusionConfig | None = None,
) -> tuple[ActionAssignment, float]:
    """Exhaustive search over one task's action space; other tasks stay at
    the defaults. Returns the lexicographically smallest argmin."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    fusion_config = fusion_config or FusionConfig()
    n = graph.num_nodes
    a = _task_action_size(task, topology, fusion_config.num_levels)
    if a**n > limit:
        raise ValueError(f"search space {a}^{n} exceeds limit {limit}")
    base = default_assignments(graph, topology, fusion_config.num_levels)
    best_actions = None
    best_time = math.inf
    for combo in itertools.product(range(a), repeat=n):
        asg = dict(base)
        asg[task] = ActionAssignment(task, np.array(combo, dtype=np.int64), a)
        res = evaluate_assignments(graph, topology, asg, fusion_config)
        if res.valid and res.step_time < best_time:
            best_time = res.step_time
            best_actions = np.array(combo, dtype=np.int64)
    if best_actions is None:
        raise RuntimeError("no valid assignment found")
    return ActionAssignment(task, best_actions, a), best_time
