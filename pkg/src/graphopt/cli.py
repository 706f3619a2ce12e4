"""Command-line front end: generate workloads, simulate assignments, run
optimizers from experiment configs, drive the generalization protocol, and
aggregate result CSVs into comparison tables.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .baselines import (
    SAConfig,
    brute_force,
    default_assignments,
    fanout_priorities,
    greedy_placement,
    simulated_annealing,
)
from .costmodel import DeviceTopology, load_topology, topology_from_dict
from .embedding import EmbedConfig
from .graph import ComputationGraph, GraphError, load_graph
from .policy import PolicyConfig
from .simulator import (
    NUM_PRIORITY_LEVELS,
    TASKS,
    ActionAssignment,
    FusionConfig,
    evaluate_assignments,
    write_trace_csv,
)
from .training import PPOHyper, pretrain_finetune_zeroshot, task_action_sizes, train
from .workloads import FAMILIES, WorkloadSpec, gen_workload

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

TASK_ALIASES = {
    "pl": "placement",
    "placement": "placement",
    "sch": "schedule_priority",
    "schedule": "schedule_priority",
    "schedule_priority": "schedule_priority",
    "fu": "fusion_priority",
    "fusion": "fusion_priority",
    "fusion_priority": "fusion_priority",
}

METHODS = ("rl", "sa", "fifo", "fanout", "greedy", "brute")

RESULT_COLUMNS = ("graph", "method", "tasks", "step_time", "baseline_time",
                  "speedup", "wall_clock", "seed")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("GRAPHOPT_SEED")
    return int(env) if env else 0


def _parse_tasks(names: list[str]) -> list[str]:
    tasks = []
    for n in names:
        if n not in TASK_ALIASES:
            raise CliError(f"unknown task {n!r} (use pl/sch/fu)")
        t = TASK_ALIASES[n]
        if t not in tasks:
            tasks.append(t)
    return [t for t in TASKS if t in tasks]


def _load_graph_entry(entry, base: Path) -> ComputationGraph:
    if isinstance(entry, str):
        return load_graph(base / entry if not Path(entry).is_absolute() else entry)
    spec = WorkloadSpec(
        family=entry["family"],
        layers=int(entry.get("layers", 2)),
        steps=int(entry.get("steps", 4)),
        width=int(entry.get("width", 32)),
        seed=int(entry.get("seed", 0)),
    )
    return gen_workload(spec)


def _load_topology_entry(entry, base: Path) -> DeviceTopology:
    if isinstance(entry, str):
        return load_topology(base / entry if not Path(entry).is_absolute() else entry)
    return topology_from_dict(entry)


def write_assignments_csv(path: Path, assignments: dict[str, ActionAssignment]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "task", "action"])
        for task in TASKS:
            if task in assignments:
                for v, a in enumerate(assignments[task].actions):
                    writer.writerow([v, task, int(a)])


def read_assignments_csv(path: Path, num_nodes: int, task_sizes: dict[str, int]
                         ) -> dict[str, ActionAssignment]:
    rows: dict[str, dict[int, int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["task"], {})[int(row["node_id"])] = int(row["action"])
    out = {}
    for task, by_node in rows.items():
        if task not in task_sizes:
            raise CliError(f"assignment file names unknown task {task!r}")
        if sorted(by_node) != list(range(num_nodes)):
            raise CliError(
                f"{task}: assignment covers {len(by_node)} nodes, graph has {num_nodes}")
        acts = np.array([by_node[v] for v in range(num_nodes)], dtype=np.int64)
        out[task] = ActionAssignment(task, acts, task_sizes[task])
    return out


def cmd_gen(args) -> int:
    spec = WorkloadSpec(family=args.family, layers=args.layers, steps=args.steps,
                        width=args.width, seed=_resolve_seed(args.seed))
    graph = gen_workload(spec, node_cap=args.cap)
    graph.save(args.output)
    print(f"{graph.name}: {graph.num_nodes} nodes, {graph.num_edges} edges -> {args.output}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    graph = load_graph(args.graph)
    topology = load_topology(args.topology)
    fusion_cfg = FusionConfig(num_levels=args.levels)
    sizes = task_action_sizes(topology, list(TASKS), fusion_cfg.num_levels)
    assignments = default_assignments(graph, topology, fusion_cfg.num_levels)
    if args.assignments:
        assignments.update(read_assignments_csv(Path(args.assignments), graph.num_nodes, sizes))
    res = evaluate_assignments(graph, topology, assignments, fusion_cfg,
                               policy=args.policy, record_trace=bool(args.trace))
    if args.trace:
        write_trace_csv(res.trace, args.trace)
    print(f"step_time {res.step_time!r}")
    print(f"valid {res.valid}")
    for d, (busy, peak) in enumerate(zip(res.per_device_busy, res.peak_mem)):
        print(f"device {d}: busy {busy!r} peak_mem {peak!r}")
    if not res.valid:
        sys.stderr.write(f"violation: {res.violation}\n")
        return EXIT_VALIDATION
    return EXIT_OK


def _check_method_tasks(method: str, tasks: list[str]):
    if method == "fanout" and tasks != ["schedule_priority"]:
        raise CliError("method=fanout requires tasks=[schedule]")
    if method == "greedy" and tasks != ["placement"]:
        raise CliError("method=greedy requires tasks=[placement]")
    if method == "brute" and len(tasks) != 1:
        raise CliError("method=brute optimizes exactly one task")
    if method in ("rl", "sa") and not tasks:
        raise CliError(f"method={method} needs at least one task")


def _run_method(method: str, graph: ComputationGraph, topology: DeviceTopology,
                tasks: list[str], seed: int, config: dict, fusion_cfg: FusionConfig
                ) -> tuple[float, dict[str, ActionAssignment], list | None]:
    """Returns (step_time, assignments, learning curve or None)."""
    assignments = default_assignments(graph, topology, fusion_cfg.num_levels)
    if method == "fifo":
        res = evaluate_assignments(graph, topology, assignments, fusion_cfg, policy="fifo")
        return res.step_time, assignments, None
    if method == "greedy":
        res = evaluate_assignments(graph, topology, assignments, fusion_cfg)
        return res.step_time, assignments, None
    if method == "fanout":
        assignments["schedule_priority"] = fanout_priorities(graph, fusion_cfg.num_levels)
        res = evaluate_assignments(graph, topology, assignments, fusion_cfg)
        return res.step_time, assignments, None
    if method == "brute":
        best, t = brute_force(graph, topology, tasks[0],
                              limit=int(config.get("brute_limit", 10**6)),
                              fusion_config=fusion_cfg)
        assignments[tasks[0]] = best
        return t, assignments, None
    if method == "sa":
        sa_cfg = SAConfig(seed=seed, **config.get("sa", {}))
        result, t = simulated_annealing(graph, topology, tasks, sa_cfg, fusion_cfg)
        return t, result, None
    if method == "rl":
        hyper = PPOHyper(**config.get("hyper", {}))
        embed_cfg = EmbedConfig(**config.get("embed", {}))
        policy_cfg = PolicyConfig(**config.get("policy", {}))
        steps = int(config.get("train_steps", 20))
        result = train([graph], topology, tasks, hyper, steps, seed,
                       embed_cfg, policy_cfg, fusion_cfg)
        sizes = task_action_sizes(topology, tasks, fusion_cfg.num_levels)
        if result.best_actions[0] is not None:
            for t_name in tasks:
                assignments[t_name] = ActionAssignment(
                    t_name, result.best_actions[0][t_name], sizes[t_name])
        return result.best_step_time, assignments, result.curve
    raise CliError(f"unknown method {method!r}")


def run_experiment(config: dict, base: Path) -> list[dict]:
    """Run every (graph, seed) pair in the config; returns result rows and
    writes results.csv plus per-run assignment CSVs to the output dir."""
    method = config["method"]
    if method not in METHODS:
        raise CliError(f"unknown method {method!r}")
    tasks = _parse_tasks(config.get("tasks", []))
    _check_method_tasks(method, tasks)
    topology = _load_topology_entry(config["topology"], base)
    fusion_cfg = FusionConfig(num_levels=int(config.get("levels", NUM_PRIORITY_LEVELS)))
    graphs = [_load_graph_entry(e, base) for e in config["graphs"]]
    seeds = config.get("seeds") or [_resolve_seed(None)]
    out_dir = Path(config.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    from .baselines import baseline_step_time

    for graph in graphs:
        base_time = baseline_step_time(graph, topology, fusion_cfg)
        for seed in seeds:
            start = time.perf_counter()
            step_time, assignments, curve = _run_method(method, graph, topology, tasks,
                                                        int(seed), config, fusion_cfg)
            wall = time.perf_counter() - start
            write_assignments_csv(out_dir / f"{graph.name}-{method}-s{seed}.csv", assignments)
            if curve is not None:
                with open(out_dir / f"{graph.name}-{method}-s{seed}-curve.csv", "w",
                          newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["step", "best_step_time"])
                    for step, best in curve:
                        writer.writerow([step, repr(best)])
            rows.append({
                "graph": graph.name,
                "method": method,
                "tasks": "+".join(tasks) if tasks else "-",
                "step_time": repr(step_time),
                "baseline_time": repr(base_time),
                "speedup": repr(base_time / step_time if step_time > 0 else math.inf),
                "wall_clock": f"{wall:.3f}",
                "seed": seed,
            })
    result_path = out_dir / "results.csv"
    with open(result_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def cmd_optimize(args) -> int:
    config = json.loads(Path(args.config).read_text())
    rows = run_experiment(config, Path(args.config).resolve().parent)
    for row in rows:
        print(f"{row['graph']} {row['method']} step_time={row['step_time']} "
              f"speedup={row['speedup']}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = json.loads(Path(args.config).read_text())
    base = Path(args.config).resolve().parent
    topology = _load_topology_entry(config["topology"], base)
    tasks = _parse_tasks(config.get("tasks", ["placement"]))
    hyper = PPOHyper(**config.get("hyper", {}))
    fusion_cfg = FusionConfig(num_levels=int(config.get("levels", NUM_PRIORITY_LEVELS)))
    train_graphs = {
        family: [_load_graph_entry(e, base) for e in entries]
        for family, entries in config["train_families"].items()
    }
    holdout = _load_graph_entry(config["holdout_graph"], base)
    rows = pretrain_finetune_zeroshot(
        train_graphs, config["holdout_family"], holdout, topology, tasks, hyper,
        seed=_resolve_seed(config.get("seed")),
        pretrain_batches=int(config.get("pretrain_batches", 5)),
        steps_per_batch=int(config.get("steps_per_batch", 4)),
        batch_size=int(config.get("batch_size", 4)),
        finetune_steps=int(config.get("finetune_steps", 20)),
        embed_cfg=EmbedConfig(**config.get("embed", {})),
        policy_cfg=PolicyConfig(**config.get("policy", {})),
        fusion_cfg=fusion_cfg,
    )
    out_dir = Path(config.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"generalization-{holdout.name}.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "step_time"])
        for mode in ("zeroshot", "finetuned", "scratch"):
            writer.writerow([mode, repr(rows[mode])])
    for mode in ("zeroshot", "finetuned", "scratch"):
        print(f"{mode}: {rows[mode]!r}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    config = json.loads(Path(args.config).read_text())
    base = Path(args.config).resolve().parent
    topology = _load_topology_entry(config["topology"], base)
    tasks = _parse_tasks(config.get("tasks", ["placement"]))
    hyper = PPOHyper(**config.get("hyper", {}))
    fusion_cfg = FusionConfig(num_levels=int(config.get("levels", NUM_PRIORITY_LEVELS)))
    embed_cfg = EmbedConfig(**config.get("embed", {}))
    policy_cfg = PolicyConfig(**config.get("policy", {}))
    steps = int(config.get("finetune_steps", 20))
    if steps > 50:
        raise CliError("fine-tuning budget is capped at 50 steps")
    graph = _load_graph_entry(config["graph"], base)
    from .policy import init_all_params

    sizes = task_action_sizes(topology, tasks, fusion_cfg.num_levels)
    store = init_all_params(embed_cfg, policy_cfg, sizes, _resolve_seed(config.get("seed")))
    store.load(config["params"] if Path(config["params"]).is_absolute()
               else base / config["params"])
    result = train([graph], topology, tasks, hyper, steps,
                   _resolve_seed(config.get("seed")), embed_cfg, policy_cfg,
                   fusion_cfg, store=store, incumbent_from_default=False)
    out_dir = Path(config.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    result.store.save(out_dir / f"finetuned-{graph.name}.npz")
    print(f"best step_time {result.best_step_time!r}")
    return EXIT_OK


def graph_family(name: str) -> str:
    for fam in FAMILIES:
        if name.startswith(fam):
            return fam
    return "other"


def geomean(values: list[float]) -> float:
    if not values:
        raise CliError("geomean of empty input")
    return float(np.exp(np.mean(np.log(values))))


def build_report(rows: list[dict]) -> list[dict]:
    """Geometric-mean speedup per (method, family) plus per-method overall."""
    groups: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        key = (row["method"], graph_family(row["graph"]))
        groups.setdefault(key, []).append(float(row["speedup"]))
    out = []
    methods = sorted({m for m, _ in groups})
    for method in methods:
        fams = sorted(f for m, f in groups if m == method)
        all_vals = []
        for fam in fams:
            vals = groups[(method, fam)]
            all_vals.extend(vals)
            out.append({"method": method, "family": fam,
                        "geomean_speedup": repr(geomean(vals)), "runs": len(vals)})
        out.append({"method": method, "family": "overall",
                    "geomean_speedup": repr(geomean(all_vals)), "runs": len(all_vals)})
    return out


def cmd_report(args) -> int:
    rows = []
    for path in args.results:
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    if not rows:
        raise CliError("no result rows found")
    report = build_report(rows)
    if args.output:
        with open(args.output, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["method", "family", "geomean_speedup", "runs"])
            writer.writeheader()
            writer.writerows(report)
    widths = (10, 18, 22, 5)
    header = ("method", "family", "geomean_speedup", "runs")
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in report:
        cells = (row["method"], row["family"],
                 f"{float(row['geomean_speedup']):.4f}", str(row["runs"]))
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic workload graph")
    p.add_argument("--family", required=True, choices=FAMILIES)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cap", type=int, default=10_000)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="simulate a graph under assignments")
    p.add_argument("graph")
    p.add_argument("--topology", required=True)
    p.add_argument("--assignments", help="CSV of node_id,task,action (defaults fill gaps)")
    p.add_argument("--policy", choices=("fifo", "priority"), default="priority")
    p.add_argument("--levels", type=int, default=NUM_PRIORITY_LEVELS)
    p.add_argument("--trace", help="write the event trace CSV here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="run an optimizer per an experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("pretrain", help="pretrain/fine-tune/zero-shot protocol")
    p.add_argument("config")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune saved params on one graph")
    p.add_argument("config")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("report", help="aggregate result CSVs into a comparison table")
    p.add_argument("results", nargs="+")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code
    except (GraphError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"runtime error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
