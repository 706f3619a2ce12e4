"""Roofline cost model: analytical kernel and transfer time estimation.

Kernel time is max(compute time at peak FLOPS, memory time at peak
bandwidth); launch overhead is not modeled. Fusing a group of ops removes
its internal tensor traffic from the memory term, which is what makes
fusion-priority choices matter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .graph import ComputationGraph, OpNode, TensorEdge


class TopologyError(ValueError):
    """Device topology file or spec violates an invariant."""


@dataclass(frozen=True)
class DeviceSpec:
    id: int
    peak_flops: float
    mem_bw: float
    mem_capacity: float

    def __post_init__(self):
        if self.peak_flops <= 0 or self.mem_bw <= 0 or self.mem_capacity <= 0:
            raise TopologyError(f"device {self.id}: all rates must be positive")


@dataclass(frozen=True)
class LinkSpec:
    src_device: int
    dst_device: int
    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise TopologyError(
                f"link {self.src_device}->{self.dst_device}: bandwidth must be positive")


@dataclass(frozen=True)
class OpCost:
    flops: float
    bytes_accessed: float

    def __post_init__(self):
        if self.flops < 0 or self.bytes_accessed < 0:
            raise ValueError("op cost must be non-negative")


class DeviceTopology:
    """A set of devices with dense ids plus one link per ordered device pair."""

    def __init__(self, devices: list[DeviceSpec], links: list[LinkSpec] | None = None,
                 uniform_bandwidth: float | None = None):
        self.devices = sorted(devices, key=lambda d: d.id)
        ids = [d.id for d in self.devices]
        if ids != list(range(len(ids))):
            raise TopologyError(f"device ids must be dense 0..D-1, got {ids}")
        d = len(ids)
        self._bw: dict[tuple[int, int], float] = {}
        if uniform_bandwidth is not None:
            for i in range(d):
                for j in range(d):
                    if i != j:
                        self._bw[(i, j)] = float(uniform_bandwidth)
        for ln in links or []:
            if not (0 <= ln.src_device < d and 0 <= ln.dst_device < d):
                raise TopologyError(f"link references unknown device: {ln}")
            self._bw[(ln.src_device, ln.dst_device)] = ln.bandwidth
        for i in range(d):
            for j in range(d):
                if i != j and (i, j) not in self._bw:
                    raise TopologyError(f"no link for device pair {i}->{j}")

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    def device(self, i: int) -> DeviceSpec:
        return self.devices[i]

    def link(self, src: int, dst: int) -> LinkSpec:
        if src == dst:
            raise TopologyError("no link for a same-device pair")
        return LinkSpec(src, dst, self._bw[(src, dst)])

    def to_dict(self) -> dict:
        return {
            "devices": [
                {"id": d.id, "peak_flops": d.peak_flops, "mem_bw": d.mem_bw,
                 "mem_capacity": d.mem_capacity}
                for d in self.devices
            ],
            "links": [
                {"src": s, "dst": t, "bandwidth": bw}
                for (s, t), bw in sorted(self._bw.items())
            ],
        }

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def load_topology(path: str | Path) -> DeviceTopology:
    data = json.loads(Path(path).read_text())
    return topology_from_dict(data)


def topology_from_dict(data: dict) -> DeviceTopology:
    devices = [
        DeviceSpec(int(d["id"]), float(d["peak_flops"]), float(d["mem_bw"]),
                   float(d["mem_capacity"]))
        for d in data["devices"]
    ]
    links_field = data.get("links")
    if isinstance(links_field, dict):
        return DeviceTopology(devices, uniform_bandwidth=float(links_field["uniform_bandwidth"]))
    links = [
        LinkSpec(int(l["src"]), int(l["dst"]), float(l["bandwidth"]))
        for l in links_field or []
    ]
    return DeviceTopology(devices, links=links)


def uniform_topology(num_devices: int, peak_flops: float = 1e12, mem_bw: float = 1e11,
                     mem_capacity: float = 16e9, link_bw: float = 1e10) -> DeviceTopology:
    devices = [DeviceSpec(i, peak_flops, mem_bw, mem_capacity) for i in range(num_devices)]
    return DeviceTopology(devices, uniform_bandwidth=link_bw)


def kernel_time(cost: OpCost, device: DeviceSpec) -> float:
    """Roofline execution time: max of compute-bound and memory-bound terms."""
    return max(cost.flops / device.peak_flops, cost.bytes_accessed / device.mem_bw)


def transfer_time(bytes_: float, link: LinkSpec) -> float:
    """Tensor transfer time over a link; same-device transfers are free."""
    if link.src_device == link.dst_device:
        return 0.0
    return bytes_ / link.bandwidth


def op_cost(node: OpNode, in_edges: list[TensorEdge]) -> OpCost:
    """Unfused op cost: all input edges read plus the output written."""
    return OpCost(node.flops, sum(e.bytes for e in in_edges) + node.output_bytes)


def fused_cost(
    nodes: list[OpNode],
    internal_edges: list[TensorEdge],
    external_in: list[TensorEdge],
    external_out: list[TensorEdge],
) -> OpCost:
    """Cost of a fused group: internal tensors stay in scratchpad and
    contribute no global-memory traffic.

    Reads are charged per external input edge. Writes are charged once per
    produced tensor that leaves the scratchpad: members with an external
    consumer, or members with no consumers at all (graph outputs). A
    singleton group therefore costs exactly op_cost, and fusion can never
    increase the modeled traffic.
    """
    if not nodes:
        raise ValueError("fused group must be non-empty")
    member_ids = {nd.id for nd in nodes}
    for e in internal_edges:
        if e.src not in member_ids or e.dst not in member_ids:
            raise ValueError(f"internal edge {e.src}->{e.dst} leaves the group")
    for e in external_in:
        if e.dst not in member_ids:
            raise ValueError(f"external-in edge {e.src}->{e.dst} does not enter the group")
    for e in external_out:
        if e.src not in member_ids:
            raise ValueError(f"external-out edge {e.src}->{e.dst} does not leave the group")
    by_id = {nd.id: nd for nd in nodes}
    flops = sum(nd.flops for nd in nodes)
    reads = sum(e.bytes for e in external_in)
    has_out = {e.src for e in internal_edges} | {e.src for e in external_out}
    writers = {e.src for e in external_out} | (member_ids - has_out)
    writes = sum(by_id[s].output_bytes for s in sorted(writers))
    return OpCost(flops, reads + writes)


def graph_op_cost(graph: ComputationGraph, v: int) -> OpCost:
    return op_cost(graph.nodes[v], graph.in_edges(v))
