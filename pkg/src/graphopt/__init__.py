"""graphopt: dataflow-graph optimization toolkit.

Simulates computation graphs on multi-device topologies with a roofline
cost model and priority scheduler, and searches device-placement,
scheduling-priority, and fusion-priority assignments with a learned graph
policy (PPO) alongside heuristic, annealing, and brute-force baselines.
"""

from .costmodel import (
    DeviceSpec,
    DeviceTopology,
    LinkSpec,
    OpCost,
    fused_cost,
    kernel_time,
    load_topology,
    op_cost,
    transfer_time,
    uniform_topology,
)
from .graph import (
    ComputationGraph,
    GraphError,
    OpNode,
    TensorEdge,
    load_graph,
    node_features,
    topo_order,
)
from .simulator import (
    ActionAssignment,
    FusedGraph,
    FusionConfig,
    SimResult,
    apply_fusion,
    check_validity,
    evaluate_assignments,
    simulate,
    singleton_fused,
)
from .workloads import FAMILIES, WorkloadSpec, gen_workload

__all__ = [
    "ActionAssignment",
    "ComputationGraph",
    "DeviceSpec",
    "DeviceTopology",
    "FAMILIES",
    "FusedGraph",
    "FusionConfig",
    "GraphError",
    "LinkSpec",
    "OpCost",
    "OpNode",
    "SimResult",
    "TensorEdge",
    "WorkloadSpec",
    "apply_fusion",
    "check_validity",
    "evaluate_assignments",
    "fused_cost",
    "gen_workload",
    "kernel_time",
    "load_graph",
    "load_topology",
    "node_features",
    "op_cost",
    "simulate",
    "singleton_fused",
    "topo_order",
    "transfer_time",
    "uniform_topology",
]
